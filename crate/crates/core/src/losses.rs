//! Rendering loss, grid smoothness, and the two stage objectives.
//!
//! Data terms are sums (not means) of squared color errors over the batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid3d::{BilateralGrid3D, COEFFS_PER_CELL};
use crate::grid4d::{LowRank4DGrid, SceneBounds};
use crate::guidance::GuidanceFn;
use crate::scene::{Camera, CompositeSample, RenderOptions, VoxelScene};
use crate::Rgb;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub data_term: f64,
    pub tv_term: f64,
    pub lambda_tv: f64,
}

impl LossReport {
    pub fn new(data_term: f64, tv_term: f64, lambda_tv: f64) -> Self {
        Self {
            total: data_term + lambda_tv * tv_term,
            data_term,
            tv_term,
            lambda_tv,
        }
    }
}

/// `Σ ‖pred − target‖²`. When `grad` is given it receives `2 (pred − target)`.
pub fn render_loss(pred: &[Rgb], target: &[Rgb], grad: Option<&mut [Rgb]>) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted pixels vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref() {
        if g.len() != pred.len() {
            return Err(Error::ShapeMismatch("gradient buffer length".into()));
        }
    }
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        if let Some(g) = grad.as_deref_mut() {
            g[i] = d.map(|x| 2.0 * x);
        }
    }
    Ok(loss)
}

/// Squared first differences along the three axes of one grid, all twelve
/// channels, divided by the grid's cell count. Gradient accumulates into
/// `grad`.
pub fn tv_loss_grid(grid: &BilateralGrid3D, grad: &mut [f64]) -> f64 {
    let (w, h, m) = grid.dims();
    let a = grid.coeffs();
    let norm = 1.0 / grid.cell_count() as f64;
    let mut loss = 0.0;
    let mut pair = |c0: usize, c1: usize, loss: &mut f64| {
        let (o0, o1) = (c0 * COEFFS_PER_CELL, c1 * COEFFS_PER_CELL);
        for e in 0..COEFFS_PER_CELL {
            let d = a[o1 + e] - a[o0 + e];
            *loss += norm * d * d;
            grad[o1 + e] += 2.0 * norm * d;
            grad[o0 + e] -= 2.0 * norm * d;
        }
    };
    for i in 0..w {
        for j in 0..h {
            for k in 0..m {
                let c = grid.cell_index(i, j, k);
                if i + 1 < w {
                    pair(c, grid.cell_index(i + 1, j, k), &mut loss);
                }
                if j + 1 < h {
                    pair(c, grid.cell_index(i, j + 1, k), &mut loss);
                }
                if k + 1 < m {
                    pair(c, grid.cell_index(i, j, k + 1), &mut loss);
                }
            }
        }
    }
    loss
}

/// Sum of [`tv_loss_grid`] over every grid. `grads[l]` receives grid `l`'s
/// gradient.
pub fn tv_loss_grids(grids: &[BilateralGrid3D], grads: &mut [Vec<f64>]) -> f64 {
    grids
        .iter()
        .zip(grads.iter_mut())
        .map(|(g, buf)| tv_loss_grid(g, buf))
        .sum()
}

/// One supervised pixel of a training view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTarget {
    pub view: usize,
    pub px: usize,
    pub py: usize,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOneGrads {
    pub scene_color: Vec<f64>,
    pub scene_density: Option<Vec<f64>>,
    pub grids: Vec<Vec<f64>>,
}

/// Joint objective of the training stage, evaluated through the full
/// renderer: render each pixel, process it with its view's grid, compare to
/// the target, and add `λ · TV` over all grids.
#[allow(clippy::too_many_arguments)]
pub fn stage_one_objective(
    scene: &VoxelScene,
    cameras: &[Camera],
    grids: &[BilateralGrid3D],
    gfn: &GuidanceFn,
    batch: &[PixelTarget],
    lambda_tv: f64,
    opts: &RenderOptions,
    train_density: bool,
) -> Result<(LossReport, StageOneGrads)> {
    if cameras.len() != grids.len() {
        return Err(Error::ShapeMismatch(format!("{} cameras vs {} grids", cameras.len(), grids.len())));
    }
    let mut grads = StageOneGrads {
        scene_color: vec![0.0; scene.colors().len()],
        scene_density: train_density.then(|| vec![0.0; scene.voxel_count()]),
        grids: grids.iter().map(|g| vec![0.0; g.coeffs().len()]).collect(),
    };
    let mut guidance_scratch = vec![0.0; gfn.param_count()];
    let mut data = 0.0;
    for t in batch {
        let cam = cameras.get(t.view).ok_or(Error::IndexOutOfRange {
            what: "view",
            index: t.view,
            len: cameras.len(),
        })?;
        let stream = (t.py * cam.width + t.px) as u64;
        let (rendered, cache) = scene.render_pixel(&cam.ray(t.px, t.py), opts, stream);
        let (u, v) = cam.uv(t.px, t.py);
        let grid = &grids[t.view];
        let out = grid.process_pixel(u, v, rendered, gfn);
        let mut up = [[0.0; 3]];
        data += render_loss(&[out], &[t.color], Some(&mut up))?;
        let dc = grid.grad_process_pixel(u, v, rendered, gfn, up[0], &mut grads.grids[t.view], &mut guidance_scratch);
        scene.grad_render_pixel(&cache, dc, &mut grads.scene_color, grads.scene_density.as_deref_mut());
    }
    let tv = if lambda_tv != 0.0 {
        let mut tv_grads: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.coeffs().len()]).collect();
        let tv = tv_loss_grids(grids, &mut tv_grads);
        for (g, t) in grads.grids.iter_mut().zip(&tv_grads) {
            for (a, b) in g.iter_mut().zip(t) {
                *a += lambda_tv * b;
            }
        }
        tv
    } else {
        0.0
    };
    Ok((LossReport::new(data, tv, lambda_tv), grads))
}

/// Radiance samples of a set of pixels under a frozen scene.
///
/// Densities are fixed in the finishing stage, so compositing weights, sample
/// positions and sample colors are computed once per pixel.
#[derive(Clone, Debug)]
pub struct SampleBundle {
    pub bounds: SceneBounds,
    /// Pixel linear index and its samples.
    pub pixels: Vec<(usize, Vec<CompositeSample>)>,
}

impl SampleBundle {
    /// Samples for the given pixel indices of `camera`, dropping samples with
    /// compositing weight below `min_weight`.
    pub fn build(scene: &VoxelScene, camera: &Camera, pixels: &[usize], opts: &RenderOptions, min_weight: f64) -> Self {
        let pixels = pixels
            .par_iter()
            .map(|&i| {
                let ray = camera.ray(i % camera.width, i / camera.width);
                (i, scene.composite_samples(&ray, opts, i as u64, min_weight))
            })
            .collect();
        Self {
            bounds: *scene.bounds(),
            pixels,
        }
    }

    pub fn full_view(scene: &VoxelScene, camera: &Camera, opts: &RenderOptions, min_weight: f64) -> Self {
        let all: Vec<usize> = (0..camera.pixel_count()).collect();
        Self::build(scene, camera, &all, opts, min_weight)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            bounds: self.bounds,
            pixels: indices.iter().map(|&i| self.pixels[i].clone()).collect(),
        }
    }

    /// Composites samples after transforming each by the 4D grid.
    pub fn render(&self, grid: &LowRank4DGrid, gfn: &GuidanceFn) -> Vec<Rgb> {
        self.pixels
            .par_iter()
            .map(|(_, samples)| finished_color(samples, grid, &self.bounds, gfn))
            .collect()
    }
}

fn finished_color(samples: &[CompositeSample], grid: &LowRank4DGrid, bounds: &SceneBounds, gfn: &GuidanceFn) -> Rgb {
    let mut c = [0.0; 3];
    for s in samples {
        let e = grid.apply_to_point(s.point, s.color, bounds, gfn);
        for ch in 0..3 {
            c[ch] += s.weight * e[ch];
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoGrads {
    pub factors: Vec<f64>,
    pub guidance: Vec<f64>,
}

const STAGE_TWO_CHUNK: usize = 64;

/// Finishing objective on the edited view: every radiance sample is
/// transformed by the 4D grid before compositing, compared to the edited
/// pixel, plus `λ · TV` on the factors. Only grid factors and guidance
/// parameters receive gradients.
pub fn stage_two_objective(
    bundle: &SampleBundle,
    grid: &LowRank4DGrid,
    gfn: &GuidanceFn,
    targets: &[Rgb],
    lambda_tv: f64,
) -> Result<(LossReport, StageTwoGrads)> {
    if targets.len() != bundle.pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} pixels",
            targets.len(),
            bundle.pixels.len()
        )));
    }
    let nf = grid.params().len();
    let ng = gfn.param_count();
    let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = bundle
        .pixels
        .par_chunks(STAGE_TWO_CHUNK)
        .zip(targets.par_chunks(STAGE_TWO_CHUNK))
        .map(|(pixels, targets)| {
            let mut fg = vec![0.0; nf];
            let mut gg = vec![0.0; ng];
            let mut loss = 0.0;
            for ((_, samples), t) in pixels.iter().zip(targets) {
                let c = finished_color(samples, grid, &bundle.bounds, gfn);
                let d = [c[0] - t[0], c[1] - t[1], c[2] - t[2]];
                loss += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let up = d.map(|x| 2.0 * x);
                for s in samples {
                    let us = up.map(|x| x * s.weight);
                    grid.grad_apply_to_point(s.point, s.color, &bundle.bounds, gfn, us, &mut fg, &mut gg);
                }
            }
            (loss, fg, gg)
        })
        .collect();

    let mut grads = StageTwoGrads {
        factors: vec![0.0; nf],
        guidance: vec![0.0; ng],
    };
    let mut data = 0.0;
    for (loss, fg, gg) in partials {
        data += loss;
        grads.factors.iter_mut().zip(&fg).for_each(|(a, b)| *a += b);
        grads.guidance.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
    }
    let tv = if lambda_tv != 0.0 {
        let mut tvg = vec![0.0; nf];
        let tv = grid.tv_loss(&mut tvg);
        grads.factors.iter_mut().zip(&tvg).for_each(|(a, b)| *a += lambda_tv * b);
        tv
    } else {
        0.0
    };
    Ok((LossReport::new(data, tv, lambda_tv), grads))
}
