//! Procedural voxel scenes and hemisphere camera rigs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid4d::SceneBounds;
use crate::scene::{softplus_inverse, Camera, VoxelScene, EMPTY_RAW_DENSITY};
use crate::Rgb;

/// Density of solid voxels, per unit length.
pub const SOLID_DENSITY: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub image_size: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub camera_distance: f64,
    pub fov_y_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            image_size: 64,
            train_views: 16,
            test_views: 8,
            camera_distance: 2.8,
            fov_y_deg: 22.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidArgument("synthetic scenes need resolution >= 8".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image size must be >= 8".into()));
        }
        if self.train_views < 3 {
            return Err(Error::InvalidArgument("at least 3 training views are required".into()));
        }
        if !(self.camera_distance > 1.8) || !(self.fov_y_deg > 0.0 && self.fov_y_deg < 90.0) {
            return Err(Error::InvalidArgument("camera distance or field of view out of range".into()));
        }
        Ok(())
    }
}

/// Ground-truth scene plus training and held-out cameras.
#[derive(Clone, Debug)]
pub struct SyntheticSetup {
    pub scene: VoxelScene,
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
}

pub const FLOOR_TOP: f64 = -0.6;
const LOOK_AT: [f64; 3] = [0.0, 0.0, -0.55];

fn palette(rng: &mut ChaCha8Rng) -> Vec<Rgb> {
    let base: [Rgb; 6] = [
        [0.85, 0.25, 0.2],
        [0.2, 0.6, 0.3],
        [0.25, 0.35, 0.85],
        [0.9, 0.8, 0.3],
        [0.75, 0.75, 0.75],
        [0.55, 0.3, 0.7],
    ];
    base.iter()
        .map(|c| c.map(|v: f64| (v + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95)))
        .collect()
}

/// A textured floor slab under a sphere and a box, inside `[-1, 1]³`.
pub fn synthetic_scene(resolution: usize, seed: u64) -> Result<VoxelScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = palette(&mut rng);
    let bounds = SceneBounds::unit_cube();
    let mut scene = VoxelScene::new([resolution; 3], bounds)?;
    let solid = softplus_inverse(SOLID_DENSITY);
    let sphere_c = [-0.35, 0.3, -0.25];
    let sphere_r = 0.33;
    let tile = 2.0 / 8.0;
    for iz in 0..resolution {
        for iy in 0..resolution {
            for ix in 0..resolution {
                let p = scene.voxel_position(ix, iy, iz);
                let idx = scene.voxel_index(ix, iy, iz);
                let d_sphere = ((p[0] - sphere_c[0]).powi(2) + (p[1] - sphere_c[1]).powi(2) + (p[2] - sphere_c[2]).powi(2)).sqrt();
                let in_box = (0.15..=0.7).contains(&p[0]) && (-0.65..=-0.1).contains(&p[1]) && p[2] <= 0.05;
                let color = if p[2] <= FLOOR_TOP {
                    let tx = ((p[0] + 1.0) / tile).floor() as i64;
                    let ty = ((p[1] + 1.0) / tile).floor() as i64;
                    let c = pal[((tx + 2 * ty).rem_euclid(5)) as usize];
                    let shade = 0.75 + 0.25 * (3.0 * p[0]).sin() * (2.0 * p[1]).cos();
                    Some(c.map(|v| (v * shade).clamp(0.03, 0.97)))
                } else if d_sphere <= sphere_r {
                    let a = (p[1] - sphere_c[1]).atan2(p[0] - sphere_c[0]);
                    let h = 0.5 + 0.45 * (p[2] - sphere_c[2]) / sphere_r;
                    Some([0.5 + 0.4 * a.cos(), h, 0.5 + 0.4 * a.sin()])
                } else if in_box {
                    let stripe = ((p[2] + 1.0) * 6.0).floor() as i64;
                    Some(if stripe % 2 == 0 { pal[3] } else { pal[5] })
                } else {
                    None
                };
                match color {
                    Some(c) => {
                        scene.raw_density_mut()[idx] = solid;
                        scene.colors_mut()[3 * idx..3 * idx + 3].copy_from_slice(&c);
                    }
                    None => scene.raw_density_mut()[idx] = EMPTY_RAW_DENSITY,
                }
            }
        }
    }
    Ok(scene)
}

/// Cameras on a hemisphere around the scene, evenly spaced in azimuth with
/// alternating elevations. `phase` shifts the azimuths by a fraction of the
/// spacing so held-out rigs fall between training cameras.
pub fn hemisphere_cameras(n: usize, first_id: usize, phase: f64, cfg: &SyntheticConfig) -> Vec<Camera> {
    let elevations = [64.0f64, 57.0, 71.0];
    (0..n)
        .map(|i| {
            let az = (i as f64 + phase) / n as f64 * std::f64::consts::TAU;
            let el = elevations[i % elevations.len()].to_radians();
            let d = cfg.camera_distance;
            let eye = [
                LOOK_AT[0] + d * el.cos() * az.cos(),
                LOOK_AT[1] + d * el.cos() * az.sin(),
                LOOK_AT[2] + d * el.sin(),
            ];
            Camera::look_at(first_id + i, eye, LOOK_AT, [0.0, 0.0, 1.0], cfg.image_size, cfg.image_size, cfg.fov_y_deg)
        })
        .collect()
}

pub fn synthetic_setup(cfg: &SyntheticConfig) -> Result<SyntheticSetup> {
    cfg.validate()?;
    Ok(SyntheticSetup {
        scene: synthetic_scene(cfg.resolution, cfg.seed)?,
        train_cameras: hemisphere_cameras(cfg.train_views, 0, 0.0, cfg),
        test_cameras: hemisphere_cameras(cfg.test_views, cfg.train_views, 0.5, cfg),
    })
}

/// Same geometry with every color reset to `gray`.
pub fn geometry_only(scene: &VoxelScene, gray: f64) -> VoxelScene {
    let mut out = scene.clone();
    out.colors_mut().fill(gray);
    out
}
