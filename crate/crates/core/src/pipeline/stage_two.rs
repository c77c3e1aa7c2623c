//! Lifting one edited view into a low-rank 4D grid over the frozen scene.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DivergenceGuard, LossRecord, DEFAULT_DIVERGENCE_RATIO};
use crate::error::{Error, Result};
use crate::grid4d::{Grid4Dims, IdentityInit, LowRank4DGrid};
use crate::guidance::{GuidanceFn, MlpGuidance};
use crate::image::Image;
use crate::losses::{stage_two_objective, LossReport, SampleBundle};
use crate::optim::{Adam, AdamConfig};
use crate::scene::{Camera, RenderOptions, VoxelScene};
use crate::Rgb;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    pub dims: Grid4Dims,
    pub rank: usize,
    pub lambda_tv: f64,
    pub steps: usize,
    pub lr_factors: f64,
    pub lr_guidance: f64,
    pub adam: AdamConfig,
    /// Learn an MLP guidance alongside the factors instead of luminance.
    pub mlp_guidance: bool,
    pub render: RenderOptions,
    pub noise_scale: f64,
    pub seed: u64,
    /// Radiance samples lighter than this are skipped.
    pub min_weight: f64,
    /// Random pixels per step; `None` uses the whole view.
    pub batch_size: Option<usize>,
    pub divergence_ratio: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            dims: Grid4Dims::default(),
            rank: 5,
            lambda_tv: 1.0,
            steps: 2500,
            lr_factors: 1e-2,
            lr_guidance: 1e-3,
            adam: AdamConfig::default(),
            mlp_guidance: false,
            render: RenderOptions::default(),
            noise_scale: 1e-3,
            seed: 0,
            min_weight: 1e-8,
            batch_size: None,
            divergence_ratio: DEFAULT_DIVERGENCE_RATIO,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if [d.depth, d.width, d.height, d.guide].contains(&0) || self.rank == 0 {
            return Err(Error::InvalidDimensions(format!("grid dims {d:?} rank {}", self.rank)));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite()) || !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("lambda_tv and noise scale must be non-negative".into()));
        }
        if !positive(self.lr_factors) || !positive(self.lr_guidance) || !positive(self.divergence_ratio) {
            return Err(Error::InvalidArgument("learning rates and divergence ratio must be positive".into()));
        }
        if self.render.samples == 0 || self.batch_size == Some(0) || !(self.min_weight >= 0.0) {
            return Err(Error::InvalidArgument("samples and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LiftResult {
    pub grid: LowRank4DGrid,
    pub guidance: GuidanceFn,
    pub history: Vec<LossRecord>,
    /// Objective on the whole edited view at the returned parameters.
    pub report: LossReport,
}

impl LiftResult {
    pub fn mlp(&self) -> Option<&MlpGuidance> {
        match &self.guidance {
            GuidanceFn::Mlp(m) => Some(m),
            GuidanceFn::Luminance => None,
        }
    }
}

/// Fits a 4D grid so that rendering `camera` with per-sample grid
/// application reproduces `edited`. The scene is only read.
pub fn lift_edit(scene: &VoxelScene, edited: &Image, camera: &Camera, cfg: &LiftConfig) -> Result<LiftResult> {
    cfg.validate()?;
    camera.validate()?;
    if edited.width() != camera.width || edited.height() != camera.height {
        return Err(Error::ShapeMismatch(format!(
            "edited image is {}x{}, camera {} is {}x{}",
            edited.width(),
            edited.height(),
            camera.id,
            camera.width,
            camera.height
        )));
    }
    let bundle = SampleBundle::full_view(scene, camera, &cfg.render, cfg.min_weight);
    let targets: Vec<Rgb> = edited.pixels().collect();
    let init = IdentityInit {
        noise_scale: cfg.noise_scale,
        seed: cfg.seed,
        ..IdentityInit::default()
    };
    let mut grid = LowRank4DGrid::identity_init(cfg.dims, cfg.rank, &init)?;
    let mut gfn = if cfg.mlp_guidance {
        GuidanceFn::Mlp(MlpGuidance::init(cfg.seed))
    } else {
        GuidanceFn::Luminance
    };
    let mut adam = Adam::new(cfg.adam);
    adam.add_block("factors", grid.params().len(), cfg.lr_factors);
    if cfg.mlp_guidance {
        adam.add_block("guidance", gfn.param_count(), cfg.lr_guidance);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = bundle.pixels.len();
    let mut guard = DivergenceGuard::new(cfg.divergence_ratio);
    let mut history = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (report, grads) = match cfg.batch_size {
            Some(b) if b < n => {
                let mut idx = sample(&mut rng, n, b).into_vec();
                idx.sort_unstable();
                let sub = bundle.subset(&idx);
                let t: Vec<Rgb> = idx.iter().map(|&i| targets[i]).collect();
                stage_two_objective(&sub, &grid, &gfn, &t, cfg.lambda_tv)?
            }
            _ => stage_two_objective(&bundle, &grid, &gfn, &targets, cfg.lambda_tv)?,
        };
        history.push(LossRecord::new(step, &report));
        guard.check(step, report.total)?;
        if step % 500 == 0 {
            log::debug!("lift step {step}: total {:.6e} data {:.6e} tv {:.6e}", report.total, report.data_term, report.tv_term);
        }
        let mut gp = gfn.params();
        {
            let mut params: Vec<&mut [f64]> = vec![grid.params_mut()];
            let mut g: Vec<&[f64]> = vec![&grads.factors];
            if cfg.mlp_guidance {
                params.push(&mut gp);
                g.push(&grads.guidance);
            }
            adam.step(&mut params, &g).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Divergence { step, loss: report.total },
                other => other,
            })?;
        }
        if cfg.mlp_guidance {
            gfn.set_params(&gp);
        }
    }
    let (report, _) = stage_two_objective(&bundle, &grid, &gfn, &targets, cfg.lambda_tv)?;
    history.push(LossRecord::new(cfg.steps, &report));
    guard.check(cfg.steps, report.total)?;
    Ok(LiftResult {
        grid,
        guidance: gfn,
        history,
        report,
    })
}

/// Renders `camera` with the grid applied to every radiance sample.
pub fn render_finished(scene: &VoxelScene, grid: &LowRank4DGrid, gfn: &GuidanceFn, camera: &Camera, opts: &RenderOptions) -> Image {
    let bundle = SampleBundle::full_view(scene, camera, opts, 0.0);
    Image::from_pixels(camera.width, camera.height, &bundle.render(grid, gfn)).expect("pixel count")
}
