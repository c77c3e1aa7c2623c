//! Toy differentiable radiance field: a Lambertian voxel grid rendered by
//! emission–absorption quadrature, and pinhole cameras.
//!
//! Along a ray clipped to the scene box, `[near, far]` is split into `N`
//! equal bins; bin `j` has length `Δ` and is sampled once (at its midpoint,
//! or jittered inside the bin when a seed is given). The pixel color is
//!
//! ```text
//! C = Σ_j T_j (1 − exp(−σ_j Δ)) c_j,   T_j = exp(−Σ_{i<j} σ_i Δ)
//! ```
//!
//! with black background. Densities are stored as raw values mapped through
//! softplus and then trilinearly interpolated, so `σ ≥ 0` everywhere.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid4d::SceneBounds;
use crate::image::Image;
use crate::interp::AxisLerp;
use crate::io;
use crate::Rgb;

/// Raw density of empty space; softplus maps it to ~4e-18.
pub const EMPTY_RAW_DENSITY: f64 = -40.0;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for `sigma > 0`.
pub fn softplus_inverse(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], dir: [f64; 3], near: f64, far: f64) -> Result<Self> {
        let n = norm(dir);
        if !(n > 0.0) || !(near >= 0.0) || !(far > near) {
            return Err(Error::InvalidArgument(format!(
                "ray needs a non-zero direction and 0 <= near < far, got near {near} far {far}"
            )));
        }
        Ok(Self {
            origin,
            dir: dir.map(|d| d / n),
            near,
            far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + t * self.dir[a])
    }

    /// Slab-method intersection with the box, clipped to `[near, far]`.
    pub fn clip(&self, bounds: &SceneBounds) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (self.near, self.far);
        for a in 0..3 {
            if self.dir[a].abs() < 1e-300 {
                if self.origin[a] < bounds.min[a] || self.origin[a] > bounds.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / self.dir[a];
            let (mut ta, mut tb) = ((bounds.min[a] - self.origin[a]) * inv, (bounds.max[a] - self.origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

/// Pinhole camera. Camera space is +x right, +y down, +z forward;
/// `rotation` maps camera directions to world directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

impl Camera {
    pub fn look_at(id: usize, eye: [f64; 3], target: [f64; 3], up: [f64; 3], width: usize, height: usize, fov_y_deg: f64) -> Self {
        let forward = normalized([0, 1, 2].map(|a| target[a] - eye[a]));
        let right = normalized(cross(forward, up));
        let down = cross(forward, right);
        let focal = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Self {
            id,
            width,
            height,
            focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: [0, 1, 2].map(|r| [right[r], down[r], forward[r]]),
            position: eye,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!("camera {} has invalid intrinsics", self.id)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rotation[k][i] * self.rotation[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!("camera {} rotation is not orthonormal", self.id)));
                }
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn ray(&self, px: usize, py: usize) -> Ray {
        let d_cam = [
            (px as f64 + 0.5 - self.cx) / self.focal,
            (py as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        ];
        let d = [0, 1, 2].map(|r| (0..3).map(|c| self.rotation[r][c] * d_cam[c]).sum::<f64>());
        Ray {
            origin: self.position,
            dir: normalized(d),
            near: 0.0,
            far: f64::INFINITY,
        }
    }

    /// Normalized screen coordinates of a pixel center.
    pub fn uv(&self, px: usize, py: usize) -> (f64, f64) {
        ((px as f64 + 0.5) / self.width as f64, (py as f64 + 0.5) / self.height as f64)
    }

    pub fn save_all(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(cameras)?)?;
        Ok(())
    }

    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
        let cams: Vec<Camera> = serde_json::from_slice(&std::fs::read(path)?)?;
        for c in &cams {
            c.validate()?;
        }
        Ok(cams)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub samples: usize,
    /// Stratified jitter inside each bin; `None` samples bin midpoints.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 128,
            jitter_seed: None,
        }
    }
}

/// Trilinear lookup: eight voxel indices and weights.
#[derive(Clone, Copy, Debug)]
pub struct VoxelStencil {
    pub voxels: [u32; 8],
    pub weights: [f64; 8],
}

#[derive(Clone, Copy, Debug)]
pub struct SampleRecord {
    pub point: [f64; 3],
    pub stencil: VoxelStencil,
    pub sigma: f64,
    pub delta: f64,
    pub color: Rgb,
    /// Transmittance before this sample.
    pub transmittance: f64,
    pub alpha: f64,
}

impl SampleRecord {
    #[inline]
    pub fn weight(&self) -> f64 {
        self.transmittance * self.alpha
    }
}

/// Per-sample state saved by the forward pass.
#[derive(Clone, Debug, Default)]
pub struct RenderCache {
    pub samples: Vec<SampleRecord>,
}

impl RenderCache {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(SampleRecord::weight)
    }
}

/// A radiance sample that survives compositing with a non-negligible weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeSample {
    pub point: [f64; 3],
    pub weight: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelScene {
    res: [usize; 3],
    bounds: SceneBounds,
    raw_density: Vec<f64>,
    color: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneHeader {
    format: String,
    version: u32,
    resolution: [usize; 3],
    bounds: SceneBounds,
}

impl VoxelScene {
    /// Empty scene (all densities ~0) with mid-gray colors.
    pub fn new(res: [usize; 3], bounds: SceneBounds) -> Result<Self> {
        if res.iter().any(|&n| n < 2) {
            return Err(Error::InvalidDimensions(format!("voxel resolution {res:?} needs >= 2 per axis")));
        }
        let n = res[0] * res[1] * res[2];
        Ok(Self {
            res,
            bounds,
            raw_density: vec![EMPTY_RAW_DENSITY; n],
            color: vec![0.5; n * 3],
        })
    }

    pub fn from_parts(res: [usize; 3], bounds: SceneBounds, raw_density: Vec<f64>, color: Vec<f64>) -> Result<Self> {
        let mut s = Self::new(res, bounds)?;
        if raw_density.len() != s.raw_density.len() || color.len() != s.color.len() {
            return Err(Error::ShapeMismatch("voxel buffers do not match resolution".into()));
        }
        if color.iter().chain(&raw_density).any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidArgument("voxel values must be finite".into()));
        }
        s.raw_density = raw_density;
        s.color = color;
        Ok(s)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.raw_density.len()
    }

    #[inline]
    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.res[1] + iy) * self.res[0] + ix
    }

    /// World position of a voxel center (corners of the box are voxel centers).
    pub fn voxel_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let i = [ix, iy, iz];
        [0, 1, 2].map(|a| self.bounds.min[a] + self.bounds.extent()[a] * i[a] as f64 / (self.res[a] - 1) as f64)
    }

    pub fn raw_density(&self) -> &[f64] {
        &self.raw_density
    }

    pub fn raw_density_mut(&mut self) -> &mut [f64] {
        &mut self.raw_density
    }

    pub fn colors(&self) -> &[f64] {
        &self.color
    }

    pub fn colors_mut(&mut self) -> &mut [f64] {
        &mut self.color
    }

    pub fn set_voxel(&mut self, idx: usize, sigma: f64, color: Rgb) {
        self.raw_density[idx] = if sigma > 0.0 { softplus_inverse(sigma) } else { EMPTY_RAW_DENSITY };
        self.color[3 * idx..3 * idx + 3].copy_from_slice(&color);
    }

    pub fn stencil(&self, p: [f64; 3]) -> VoxelStencil {
        let t = self.bounds.normalize(p);
        let ax = [0, 1, 2].map(|a| AxisLerp::new(t[a], self.res[a]));
        let mut s = VoxelStencil {
            voxels: [0; 8],
            weights: [0.0; 8],
        };
        for n in 0..8 {
            let (a, b, c) = (n & 1, (n >> 1) & 1, n >> 2);
            s.voxels[n] = self.voxel_index(ax[0].index(a), ax[1].index(b), ax[2].index(c)) as u32;
            s.weights[n] = ax[0].weights()[a] * ax[1].weights()[b] * ax[2].weights()[c];
        }
        s
    }

    fn lookup(&self, st: &VoxelStencil) -> (f64, Rgb) {
        let mut sigma = 0.0;
        let mut c = [0.0; 3];
        for n in 0..8 {
            let v = st.voxels[n] as usize;
            let w = st.weights[n];
            sigma += w * softplus(self.raw_density[v]);
            for ch in 0..3 {
                c[ch] += w * self.color[3 * v + ch];
            }
        }
        (sigma, c)
    }

    /// Sample positions along the clipped ray: `(t, Δ)` per bin.
    fn sample_positions(&self, ray: &Ray, opts: &RenderOptions, stream: u64) -> Vec<(f64, f64)> {
        let Some((t0, t1)) = ray.clip(&self.bounds) else {
            return Vec::new();
        };
        let n = opts.samples.max(1);
        let delta = (t1 - t0) / n as f64;
        let mut rng = opts.jitter_seed.map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        });
        (0..n)
            .map(|j| {
                let xi = rng.as_mut().map_or(0.5, |r| r.gen::<f64>());
                (t0 + (j as f64 + xi) * delta, delta)
            })
            .collect()
    }

    /// Renders one ray. `stream` selects the jitter sequence (use the pixel
    /// index) and is ignored without a jitter seed.
    pub fn render_pixel(&self, ray: &Ray, opts: &RenderOptions, stream: u64) -> (Rgb, RenderCache) {
        let positions = self.sample_positions(ray, opts, stream);
        let mut cache = RenderCache {
            samples: Vec::with_capacity(positions.len()),
        };
        let mut out = [0.0; 3];
        let mut optical_depth: f64 = 0.0;
        for (t, delta) in positions {
            let point = ray.at(t);
            let stencil = self.stencil(point);
            let (sigma, color) = self.lookup(&stencil);
            let transmittance = (-optical_depth).exp();
            let alpha = -(-sigma * delta).exp_m1();
            let w = transmittance * alpha;
            for ch in 0..3 {
                out[ch] += w * color[ch];
            }
            optical_depth += sigma * delta;
            cache.samples.push(SampleRecord {
                point,
                stencil,
                sigma,
                delta,
                color,
                transmittance,
                alpha,
            });
        }
        (out, cache)
    }

    /// Backward pass of [`render_pixel`](Self::render_pixel). Voxel color
    /// gradients accumulate into `color_grad` (3 per voxel); raw density
    /// gradients into `density_grad` when given.
    pub fn grad_render_pixel(&self, cache: &RenderCache, upstream: Rgb, color_grad: &mut [f64], density_grad: Option<&mut [f64]>) {
        let dot = |c: Rgb| c[0] * upstream[0] + c[1] * upstream[1] + c[2] * upstream[2];
        for s in &cache.samples {
            let w = s.weight();
            if w == 0.0 {
                continue;
            }
            for n in 0..8 {
                let v = s.stencil.voxels[n] as usize;
                let k = w * s.stencil.weights[n];
                for ch in 0..3 {
                    color_grad[3 * v + ch] += k * upstream[ch];
                }
            }
        }
        let Some(density_grad) = density_grad else {
            return;
        };
        // dC/dσ_k = Δ_k (T_{k+1} c_k − Σ_{j>k} w_j c_j)
        let mut behind = 0.0;
        for s in cache.samples.iter().rev() {
            let t_next = s.transmittance * (1.0 - s.alpha);
            let dsigma = s.delta * (t_next * dot(s.color) - behind);
            behind += s.weight() * dot(s.color);
            if dsigma == 0.0 {
                continue;
            }
            for n in 0..8 {
                let v = s.stencil.voxels[n] as usize;
                density_grad[v] += dsigma * s.stencil.weights[n] * sigmoid(self.raw_density[v]);
            }
        }
    }

    /// Radiance samples with compositing weight at least `min_weight`.
    pub fn composite_samples(&self, ray: &Ray, opts: &RenderOptions, stream: u64, min_weight: f64) -> Vec<CompositeSample> {
        let (_, cache) = self.render_pixel(ray, opts, stream);
        cache
            .samples
            .iter()
            .filter(|s| s.weight() >= min_weight && s.weight() > 0.0)
            .map(|s| CompositeSample {
                point: s.point,
                weight: s.weight(),
                color: s.color,
            })
            .collect()
    }

    /// Renders a full view; pixel `i` uses jitter stream `i`.
    pub fn render_view(&self, camera: &Camera, opts: &RenderOptions) -> Image {
        let pixels: Vec<Rgb> = (0..camera.pixel_count())
            .into_par_iter()
            .map(|i| {
                let ray = camera.ray(i % camera.width, i / camera.width);
                self.render_pixel(&ray, opts, i as u64).0
            })
            .collect();
        Image::from_pixels(camera.width, camera.height, &pixels).expect("pixel count")
    }

    /// Linear footprint of a ray on the voxel colors, for fixed densities.
    ///
    /// Entries below `min_weight` are dropped.
    pub fn footprint(&self, ray: &Ray, opts: &RenderOptions, stream: u64, min_weight: f64) -> Vec<(u32, f64)> {
        let (_, cache) = self.render_pixel(ray, opts, stream);
        let mut entries: Vec<(u32, f64)> = Vec::new();
        for s in &cache.samples {
            let w = s.weight();
            if w < min_weight {
                continue;
            }
            for n in 0..8 {
                if s.stencil.weights[n] > 0.0 {
                    entries.push((s.stencil.voxels[n], w * s.stencil.weights[n]));
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (v, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += w,
                _ => merged.push((v, w)),
            }
        }
        merged.retain(|e| e.1 >= min_weight);
        merged
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.res.hash(&mut h);
        for v in self.raw_density.iter().chain(&self.color) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// One JSON header line, then raw densities and colors as f32 LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = SceneHeader {
            format: "BSCN".into(),
            version: 1,
            resolution: self.res,
            bounds: self.bounds,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        io::write_f32s(w, self.raw_density.iter().copied())?;
        io::write_f32s(w, self.color.iter().copied())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: SceneHeader = serde_json::from_str(line.trim_end())?;
        if header.format != "BSCN" || header.version != 1 {
            return Err(Error::Format(format!("unsupported scene format {} v{}", header.format, header.version)));
        }
        let bounds = SceneBounds::new(header.bounds.min, header.bounds.max)?;
        let n: usize = header.resolution.iter().product();
        let raw = io::read_f32s(r, n)?;
        let color = io::read_f32s(r, 3 * n)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after scene payload".into()));
        }
        Self::from_parts(header.resolution, bounds, raw, color)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
