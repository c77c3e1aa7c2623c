//! 3D bilateral grid of local affine color transforms.
//!
//! A grid covers `(screen-x, screen-y, guidance)` with `W × H × M` cells, each
//! storing a 3×4 affine transform. Slicing interpolates the eight cells
//! around a query with hat-kernel (trilinear) weights; the result is applied
//! to the pixel's homogeneous color `[C | 1]`.
//!
//! Coordinates use align-corners mapping: `u = 0` and `u = 1` land exactly on
//! the first and last cells, so the weights form a partition of unity on the
//! whole unit cube. Queries outside `[0, 1]` are clamped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceFn;
use crate::interp::{lerp, AxisLerp};
use crate::io;
use crate::Rgb;

pub const COEFFS_PER_CELL: usize = 12;

const GRID3_MAGIC: &[u8; 4] = b"BGRD";
const GRID3_VERSION: u32 = 1;

/// Row-major 3×4 matrix `[linear | translation]`: entry `(r, s)` lives at
/// `r * 4 + s`, with `s == 3` the translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform(pub [f64; COEFFS_PER_CELL]);

impl AffineTransform {
    pub const IDENTITY: Self = Self([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    ]);

    pub fn from_parts(linear: [[f64; 3]; 3], translation: Rgb) -> Self {
        let mut m = [0.0; COEFFS_PER_CELL];
        for r in 0..3 {
            m[r * 4..r * 4 + 3].copy_from_slice(&linear[r]);
            m[r * 4 + 3] = translation[r];
        }
        Self(m)
    }

    /// Per-channel gain and offset.
    pub fn diagonal(gain: Rgb, offset: Rgb) -> Self {
        let mut linear = [[0.0; 3]; 3];
        for c in 0..3 {
            linear[c][c] = gain[c];
        }
        Self::from_parts(linear, offset)
    }

    #[inline]
    pub fn apply(&self, c: Rgb) -> Rgb {
        let m = &self.0;
        [
            m[0] * c[0] + m[1] * c[1] + m[2] * c[2] + m[3],
            m[4] * c[0] + m[5] * c[1] + m[6] * c[2] + m[7],
            m[8] * c[0] + m[9] * c[1] + m[10] * c[2] + m[11],
        ]
    }

    pub fn translation(&self) -> Rgb {
        [self.0[3], self.0[7], self.0[11]]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// The eight cells touched by a query, with hat-kernel weights and their
/// derivative with respect to the guidance coordinate.
#[derive(Clone, Copy, Debug)]
pub struct SliceStencil {
    pub cells: [usize; 8],
    pub weights: [f64; 8],
    pub dweights_dg: [f64; 8],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralGrid3D {
    width: usize,
    height: usize,
    depth: usize,
    coeffs: Vec<f64>,
}

impl BilateralGrid3D {
    /// Identity-initialized grid.
    pub fn new(width: usize, height: usize, depth: usize) -> Result<Self> {
        Self::filled(width, height, depth, AffineTransform::IDENTITY)
    }

    pub fn filled(width: usize, height: usize, depth: usize, t: AffineTransform) -> Result<Self> {
        if width == 0 || height == 0 || depth == 0 {
            return Err(Error::InvalidDimensions(format!(
                "bilateral grid {width}x{height}x{depth} must have at least one cell per axis"
            )));
        }
        let coeffs = t.0.iter().copied().cycle().take(width * height * depth * COEFFS_PER_CELL).collect();
        Ok(Self {
            width,
            height,
            depth,
            coeffs,
        })
    }

    pub fn from_coeffs(width: usize, height: usize, depth: usize, coeffs: Vec<f64>) -> Result<Self> {
        let mut grid = Self::new(width, height, depth)?;
        if coeffs.len() != grid.coeffs.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coefficients, got {}",
                grid.coeffs.len(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("grid coefficients must be finite".into()));
        }
        grid.coeffs = coeffs;
        Ok(grid)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Cells are stored row-major over `(x, y, guidance)`.
    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.height + j) * self.depth + k
    }

    pub fn cell(&self, i: usize, j: usize, k: usize) -> AffineTransform {
        let o = self.cell_index(i, j, k) * COEFFS_PER_CELL;
        let mut m = [0.0; COEFFS_PER_CELL];
        m.copy_from_slice(&self.coeffs[o..o + COEFFS_PER_CELL]);
        AffineTransform(m)
    }

    pub fn set_cell(&mut self, i: usize, j: usize, k: usize, t: AffineTransform) {
        let o = self.cell_index(i, j, k) * COEFFS_PER_CELL;
        self.coeffs[o..o + COEFFS_PER_CELL].copy_from_slice(&t.0);
    }

    fn lerps(&self, u: f64, v: f64, g: f64) -> [AxisLerp; 3] {
        [
            AxisLerp::new(u, self.width),
            AxisLerp::new(v, self.height),
            AxisLerp::new(g, self.depth),
        ]
    }

    pub fn stencil(&self, u: f64, v: f64, g: f64) -> SliceStencil {
        let [ax, ay, ag] = self.lerps(u, v, g);
        let (wx, wy, wg) = (ax.weights(), ay.weights(), ag.weights());
        let dwg = [-ag.dfrac, ag.dfrac];
        let mut s = SliceStencil {
            cells: [0; 8],
            weights: [0.0; 8],
            dweights_dg: [0.0; 8],
        };
        for n in 0..8 {
            let (a, b, c) = (n >> 2, (n >> 1) & 1, n & 1);
            s.cells[n] = self.cell_index(ax.index(a), ay.index(b), ag.index(c));
            s.weights[n] = wx[a] * wy[b] * wg[c];
            s.dweights_dg[n] = wx[a] * wy[b] * dwg[c];
        }
        s
    }

    /// Trilinear slice at `(u, v, g)`.
    ///
    /// Evaluated as nested lerps so that a region of identical cells slices to
    /// exactly that cell's transform.
    pub fn slice(&self, u: f64, v: f64, g: f64) -> AffineTransform {
        let [ax, ay, ag] = self.lerps(u, v, g);
        let at = |i: usize, j: usize, k: usize| self.cell_index(i, j, k) * COEFFS_PER_CELL;
        let c000 = at(ax.lo, ay.lo, ag.lo);
        let c001 = at(ax.lo, ay.lo, ag.hi);
        let c010 = at(ax.lo, ay.hi, ag.lo);
        let c011 = at(ax.lo, ay.hi, ag.hi);
        let c100 = at(ax.hi, ay.lo, ag.lo);
        let c101 = at(ax.hi, ay.lo, ag.hi);
        let c110 = at(ax.hi, ay.hi, ag.lo);
        let c111 = at(ax.hi, ay.hi, ag.hi);
        let a = &self.coeffs;
        let mut out = [0.0; COEFFS_PER_CELL];
        for (e, o) in out.iter_mut().enumerate() {
            let x00 = lerp(a[c000 + e], a[c100 + e], ax.frac);
            let x01 = lerp(a[c001 + e], a[c101 + e], ax.frac);
            let x10 = lerp(a[c010 + e], a[c110 + e], ax.frac);
            let x11 = lerp(a[c011 + e], a[c111 + e], ax.frac);
            let y0 = lerp(x00, x10, ay.frac);
            let y1 = lerp(x01, x11, ay.frac);
            *o = lerp(y0, y1, ag.frac);
        }
        AffineTransform(out)
    }

    /// Slices at `(u, v, gfn(c))` and applies the transform to `c`.
    pub fn process_pixel(&self, u: f64, v: f64, c: Rgb, gfn: &GuidanceFn) -> Rgb {
        self.slice(u, v, gfn.guide(c)).apply(c)
    }

    /// Backward pass of [`process_pixel`](Self::process_pixel).
    ///
    /// Coefficient gradients (at most eight cells) are accumulated into
    /// `grid_grad` (same layout as [`coeffs`](Self::coeffs)); guidance
    /// parameter gradients into `guidance_grad`. Returns the gradient with
    /// respect to the input color, including the path through the guidance.
    pub fn grad_process_pixel(
        &self,
        u: f64,
        v: f64,
        c: Rgb,
        gfn: &GuidanceFn,
        upstream: Rgb,
        grid_grad: &mut [f64],
        guidance_grad: &mut [f64],
    ) -> Rgb {
        debug_assert_eq!(grid_grad.len(), self.coeffs.len());
        if upstream == [0.0; 3] {
            return [0.0; 3];
        }
        let g = gfn.guide(c);
        let st = self.stencil(u, v, g);
        let ch = [c[0], c[1], c[2], 1.0];

        let mut sliced = [0.0; COEFFS_PER_CELL];
        let mut dsliced_dg = [0.0; COEFFS_PER_CELL];
        for n in 0..8 {
            let o = st.cells[n] * COEFFS_PER_CELL;
            let cell = &self.coeffs[o..o + COEFFS_PER_CELL];
            let (w, dw) = (st.weights[n], st.dweights_dg[n]);
            let gcell = &mut grid_grad[o..o + COEFFS_PER_CELL];
            for r in 0..3 {
                let wu = w * upstream[r];
                for s in 0..4 {
                    let e = r * 4 + s;
                    sliced[e] += w * cell[e];
                    dsliced_dg[e] += dw * cell[e];
                    gcell[e] += wu * ch[s];
                }
            }
        }

        let mut dc = [0.0; 3];
        let mut dg = 0.0;
        for r in 0..3 {
            for s in 0..4 {
                let e = r * 4 + s;
                if s < 3 {
                    dc[s] += upstream[r] * sliced[e];
                }
                dg += upstream[r] * dsliced_dg[e] * ch[s];
            }
        }
        let dc_guidance = gfn.backward(c, dg, guidance_grad);
        [dc[0] + dc_guidance[0], dc[1] + dc_guidance[1], dc[2] + dc_guidance[2]]
    }

    /// Largest entry-wise deviation of any cell from the identity transform.
    ///
    /// Slices are convex combinations of cells, so this bounds the deviation of
    /// every sliced transform.
    pub fn max_identity_deviation(&self) -> f64 {
        self.coeffs
            .chunks_exact(COEFFS_PER_CELL)
            .flat_map(|cell| cell.iter().zip(&AffineTransform::IDENTITY.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Spatial variance of the translation column: for every guidance slice
    /// and channel, the variance over the `W × H` cells, averaged.
    pub fn translation_spatial_variance(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        let mut total = 0.0;
        for k in 0..self.depth {
            for r in 0..3 {
                let values = (0..self.width)
                    .flat_map(|i| (0..self.height).map(move |j| (i, j)))
                    .map(|(i, j)| self.coeffs[self.cell_index(i, j, k) * COEFFS_PER_CELL + r * 4 + 3]);
                let (sum, sq) = values.fold((0.0, 0.0), |(s, q), x| (s + x, q + x * x));
                let mean = sum / n;
                total += sq / n - mean * mean;
            }
        }
        total / (self.depth * 3) as f64
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GRID3_MAGIC)?;
        io::write_u32(w, GRID3_VERSION)?;
        for d in [self.width, self.height, self.depth] {
            io::write_u32(w, d as u32)?;
        }
        io::write_f32s(w, self.coeffs.iter().copied())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, GRID3_MAGIC)?;
        io::expect_version(r, GRID3_VERSION)?;
        let width = io::dim(io::read_u32(r)?, "width")?;
        let height = io::dim(io::read_u32(r)?, "height")?;
        let depth = io::dim(io::read_u32(r)?, "depth")?;
        let coeffs = io::read_f32s(r, width * height * depth * COEFFS_PER_CELL)?;
        io::expect_eof(r)?;
        Self::from_coeffs(width, height, depth, coeffs)
    }

    /// Writes the `BGRD` container and a `.json` sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        let sidecar = serde_json::json!({
            "format": "BGRD",
            "version": GRID3_VERSION,
            "width": self.width,
            "height": self.height,
            "depth": self.depth,
            "coeffs": self.coeffs.iter().map(|&v| v as f32).collect::<Vec<_>>(),
        });
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
