//! Programmatic edits standing in for interactive retouching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid3d::AffineTransform;
use crate::image::Image;
use crate::scene::{Camera, RenderOptions, VoxelScene};
use crate::Rgb;

/// The same transform on every pixel.
pub fn affine_edit(image: &Image, t: &AffineTransform) -> Image {
    image.map(|_, _, c| t.apply(c))
}

/// Renders `camera` with `edit(point, color)` applied to every radiance
/// sample before compositing.
pub fn render_point_edit<F>(scene: &VoxelScene, camera: &Camera, opts: &RenderOptions, edit: F) -> Image
where
    F: Fn([f64; 3], Rgb) -> Rgb + Sync,
{
    let pixels: Vec<Rgb> = (0..camera.pixel_count())
        .into_par_iter()
        .map(|i| {
            let ray = camera.ray(i % camera.width, i / camera.width);
            let mut c = [0.0; 3];
            for s in scene.composite_samples(&ray, opts, i as u64, 0.0) {
                let e = edit(s.point, s.color);
                for ch in 0..3 {
                    c[ch] += s.weight * e[ch];
                }
            }
            c
        })
        .collect();
    Image::from_pixels(camera.width, camera.height, &pixels).expect("pixel count")
}

/// Different transforms on the two sides of the plane `p[axis] = split`,
/// blended by a logistic of width `width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoRegionEdit {
    pub axis: usize,
    pub split: f64,
    pub width: f64,
    pub negative: AffineTransform,
    pub positive: AffineTransform,
}

impl TwoRegionEdit {
    /// Warm brightening for `x < 0`, cool darkening for `x > 0`.
    pub fn brighten_darken() -> Self {
        Self {
            axis: 0,
            split: 0.0,
            width: 0.08,
            negative: AffineTransform::diagonal([1.35, 1.15, 0.95], [0.03, 0.02, 0.0]),
            positive: AffineTransform::diagonal([0.65, 0.75, 0.9], [0.0, 0.0, 0.02]),
        }
    }

    pub fn transform_at(&self, p: [f64; 3]) -> AffineTransform {
        let s = 1.0 / (1.0 + (-(p[self.axis] - self.split) / self.width).exp());
        let mut t = [0.0; 12];
        for (e, v) in t.iter_mut().enumerate() {
            *v = (1.0 - s) * self.negative.0[e] + s * self.positive.0[e];
        }
        AffineTransform(t)
    }

    pub fn apply(&self, p: [f64; 3], c: Rgb) -> Rgb {
        self.transform_at(p).apply(c)
    }
}
