//! Low-rank 4D bilateral grid over `(z, x, y, guidance)`.
//!
//! The dense `D × W × H × M × 12` tensor is never stored. It is represented by
//! `R` rank-one terms, each an outer product of five factor vectors
//! (one per axis plus a 12-vector of transform coefficients). Because the
//! hat kernel is separable, slicing one rank-one term is the product of four
//! 1D interpolations, and the sliced transform is `U · s` where `s` stacks the
//! `R` interpolated products and `U` stacks the coefficient factors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cp::{cp_als, AlsOptions, DenseTensor};
use crate::error::{Error, Result};
use crate::grid3d::{AffineTransform, COEFFS_PER_CELL};
use crate::guidance::{GuidanceFn, MlpGuidance};
use crate::interp::AxisLerp;
use crate::io;
use crate::Rgb;

const GRID4_MAGIC: &[u8; 4] = b"BGR4";
const GRID4_VERSION: u32 = 1;

/// Factor families in storage order.
pub const FAMILY_Z: usize = 0;
pub const FAMILY_X: usize = 1;
pub const FAMILY_Y: usize = 2;
pub const FAMILY_GUIDE: usize = 3;
pub const FAMILY_COEFF: usize = 4;

/// Axis-aligned scene box used to normalize world points into `[0, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene bounds need max > min on every axis, got {min:?} .. {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn unit_cube() -> Self {
        Self {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    /// Maps a world point into the unit cube (not clamped).
    #[inline]
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }
}

/// Grid resolution `(D, W, H, M)` along `(z, x, y, guidance)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid4Dims {
    pub depth: usize,
    pub width: usize,
    pub height: usize,
    pub guide: usize,
}

impl Grid4Dims {
    pub const fn new(depth: usize, width: usize, height: usize, guide: usize) -> Self {
        Self {
            depth,
            width,
            height,
            guide,
        }
    }

    fn family_len(&self, family: usize) -> usize {
        match family {
            FAMILY_Z => self.depth,
            FAMILY_X => self.width,
            FAMILY_Y => self.height,
            FAMILY_GUIDE => self.guide,
            _ => COEFFS_PER_CELL,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.depth * self.width * self.height * self.guide
    }
}

impl Default for Grid4Dims {
    fn default() -> Self {
        Self::new(16, 16, 16, 8)
    }
}

/// Options for [`LowRank4DGrid::identity_init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityInit {
    pub noise_scale: f64,
    pub seed: u64,
    pub als: AlsOptions,
}

impl Default for IdentityInit {
    fn default() -> Self {
        Self {
            noise_scale: 1e-3,
            seed: 0,
            als: AlsOptions::default(),
        }
    }
}

/// The four 1D interpolations for one query point.
#[derive(Clone, Copy, Debug)]
pub struct PointStencil {
    axes: [AxisLerp; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRank4DGrid {
    dims: Grid4Dims,
    rank: usize,
    /// Family-major, then rank-major factor entries.
    params: Vec<f64>,
    offsets: [usize; 5],
}

impl LowRank4DGrid {
    fn layout(dims: Grid4Dims, rank: usize) -> ([usize; 5], usize) {
        let mut offsets = [0; 5];
        let mut total = 0;
        for (f, o) in offsets.iter_mut().enumerate() {
            *o = total;
            total += rank * dims.family_len(f);
        }
        (offsets, total)
    }

    fn validate(dims: Grid4Dims, rank: usize) -> Result<()> {
        if dims.depth == 0 || dims.width == 0 || dims.height == 0 || dims.guide == 0 || rank == 0 {
            return Err(Error::InvalidDimensions(format!(
                "4D grid {dims:?} with rank {rank} must have positive sizes"
            )));
        }
        Ok(())
    }

    /// Rank-one identity: all-ones axis factors times the identity 12-vector.
    /// Extra ranks are zero.
    pub fn identity(dims: Grid4Dims, rank: usize) -> Result<Self> {
        Self::validate(dims, rank)?;
        let (offsets, total) = Self::layout(dims, rank);
        let mut grid = Self {
            dims,
            rank,
            params: vec![0.0; total],
            offsets,
        };
        for f in 0..4 {
            grid.factor_mut(f, 0).fill(1.0);
        }
        grid.factor_mut(FAMILY_COEFF, 0).copy_from_slice(&AffineTransform::IDENTITY.0);
        Ok(grid)
    }

    pub fn from_params(dims: Grid4Dims, rank: usize, params: Vec<f64>) -> Result<Self> {
        Self::validate(dims, rank)?;
        let (offsets, total) = Self::layout(dims, rank);
        if params.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "rank-{rank} grid {dims:?} needs {total} factor entries, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("factor entries must be finite".into()));
        }
        Ok(Self {
            dims,
            rank,
            params,
            offsets,
        })
    }

    pub fn dims(&self) -> Grid4Dims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of `family`'s rank-`r` vector inside [`params`](Self::params).
    pub fn factor_range(&self, family: usize, r: usize) -> std::ops::Range<usize> {
        let len = self.dims.family_len(family);
        let start = self.offsets[family] + r * len;
        start..start + len
    }

    pub fn factor(&self, family: usize, r: usize) -> &[f64] {
        &self.params[self.factor_range(family, r)]
    }

    pub fn factor_mut(&mut self, family: usize, r: usize) -> &mut [f64] {
        let range = self.factor_range(family, r);
        &mut self.params[range]
    }

    /// Normalized `(x, y, z)` plus guidance → stencil. Axis order follows the
    /// factor families: z, x, y, guidance.
    pub fn stencil(&self, x: f64, y: f64, z: f64, g: f64) -> PointStencil {
        PointStencil {
            axes: [
                AxisLerp::new(z, self.dims.depth),
                AxisLerp::new(x, self.dims.width),
                AxisLerp::new(y, self.dims.height),
                AxisLerp::new(g, self.dims.guide),
            ],
        }
    }

    fn slice_stencil(&self, st: &PointStencil) -> AffineTransform {
        let mut out = [0.0; COEFFS_PER_CELL];
        for r in 0..self.rank {
            let s: f64 = (0..4).map(|f| st.axes[f].lerp(self.factor(f, r))).product();
            for (o, &u) in out.iter_mut().zip(self.factor(FAMILY_COEFF, r)) {
                *o += s * u;
            }
        }
        AffineTransform(out)
    }

    /// Slice at normalized `(x, y, z)` and guidance `g`, all in `[0, 1]`
    /// (clamped).
    pub fn slice(&self, x: f64, y: f64, z: f64, g: f64) -> AffineTransform {
        self.slice_stencil(&self.stencil(x, y, z, g))
    }

    /// Transforms the radiance `c` emitted at world point `p`.
    pub fn apply_to_point(&self, p: [f64; 3], c: Rgb, bounds: &SceneBounds, gfn: &GuidanceFn) -> Rgb {
        let [x, y, z] = bounds.normalize(p);
        self.slice(x, y, z, gfn.guide(c)).apply(c)
    }

    /// Backward pass of [`apply_to_point`](Self::apply_to_point). Factor
    /// gradients accumulate into `factor_grad` (layout of
    /// [`params`](Self::params)), guidance gradients into `guidance_grad`.
    /// Returns the gradient with respect to `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn grad_apply_to_point(
        &self,
        p: [f64; 3],
        c: Rgb,
        bounds: &SceneBounds,
        gfn: &GuidanceFn,
        upstream: Rgb,
        factor_grad: &mut [f64],
        guidance_grad: &mut [f64],
    ) -> Rgb {
        debug_assert_eq!(factor_grad.len(), self.params.len());
        if upstream == [0.0; 3] {
            return [0.0; 3];
        }
        let [x, y, z] = bounds.normalize(p);
        let g = gfn.guide(c);
        let st = self.stencil(x, y, z, g);
        let ch = [c[0], c[1], c[2], 1.0];
        // dL/dA for the sliced 3×4 matrix
        let mut ga = [0.0; COEFFS_PER_CELL];
        for r in 0..3 {
            for s in 0..4 {
                ga[r * 4 + s] = upstream[r] * ch[s];
            }
        }

        let mut sliced = [0.0; COEFFS_PER_CELL];
        let mut dg = 0.0;
        for r in 0..self.rank {
            let p: [f64; 4] = [0, 1, 2, 3].map(|f| st.axes[f].lerp(self.factor(f, r)));
            let s = p[0] * p[1] * p[2] * p[3];
            let coeff_range = self.factor_range(FAMILY_COEFF, r);
            let u = &self.params[coeff_range.clone()];
            let mut ds = 0.0;
            for e in 0..COEFFS_PER_CELL {
                sliced[e] += s * u[e];
                ds += u[e] * ga[e];
                factor_grad[coeff_range.start + e] += s * ga[e];
            }
            for f in 0..4 {
                let others: f64 = (0..4).filter(|&k| k != f).map(|k| p[k]).product();
                let dp = ds * others;
                let ax = &st.axes[f];
                let base = self.factor_range(f, r).start;
                let [w0, w1] = ax.weights();
                factor_grad[base + ax.lo] += dp * w0;
                factor_grad[base + ax.hi] += dp * w1;
                if f == FAMILY_GUIDE && ax.dfrac != 0.0 {
                    let v = self.factor(f, r);
                    dg += dp * (v[ax.hi] - v[ax.lo]) * ax.dfrac;
                }
            }
        }

        let mut dc = [0.0; 3];
        for r in 0..3 {
            for s in 0..3 {
                dc[s] += upstream[r] * sliced[r * 4 + s];
            }
        }
        let dcg = gfn.backward(c, dg, guidance_grad);
        [dc[0] + dcg[0], dc[1] + dcg[1], dc[2] + dcg[2]]
    }

    /// Mean squared first differences of every axis factor, summed over the
    /// four axis families and all ranks. Each family's sum is divided by its
    /// length. Gradients accumulate into `grad`.
    pub fn tv_loss(&self, grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut loss = 0.0;
        for f in 0..4 {
            let len = self.dims.family_len(f);
            let norm = 1.0 / len as f64;
            for r in 0..self.rank {
                let range = self.factor_range(f, r);
                let v = &self.params[range.clone()];
                for i in 0..len.saturating_sub(1) {
                    let d = v[i + 1] - v[i];
                    loss += norm * d * d;
                    grad[range.start + i + 1] += 2.0 * norm * d;
                    grad[range.start + i] -= 2.0 * norm * d;
                }
            }
        }
        loss
    }

    /// Dense `D × W × H × M × 12` tensor implied by the factors.
    pub fn materialize(&self) -> DenseTensor {
        let d = self.dims;
        let mut data = Vec::with_capacity(d.cell_count() * COEFFS_PER_CELL);
        for h in 0..d.depth {
            for i in 0..d.width {
                for j in 0..d.height {
                    for k in 0..d.guide {
                        let mut cell = [0.0; COEFFS_PER_CELL];
                        for r in 0..self.rank {
                            let s = self.factor(FAMILY_Z, r)[h]
                                * self.factor(FAMILY_X, r)[i]
                                * self.factor(FAMILY_Y, r)[j]
                                * self.factor(FAMILY_GUIDE, r)[k];
                            for (c, u) in cell.iter_mut().zip(self.factor(FAMILY_COEFF, r)) {
                                *c += s * u;
                            }
                        }
                        data.extend_from_slice(&cell);
                    }
                }
            }
        }
        DenseTensor::new(vec![d.depth, d.width, d.height, d.guide, COEFFS_PER_CELL], data)
            .expect("materialized shape")
    }

    /// Largest entry-wise deviation from identity over every lattice node.
    ///
    /// The slice is multilinear in each coordinate, so its extremes over the
    /// domain are attained at lattice nodes.
    pub fn max_identity_deviation(&self) -> f64 {
        let dense = self.materialize();
        dense
            .data()
            .chunks_exact(COEFFS_PER_CELL)
            .flat_map(|cell| cell.iter().zip(&AffineTransform::IDENTITY.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Identity transforms everywhere plus uniform noise in
    /// `±noise_scale`, decomposed to rank `rank` with CP-ALS.
    ///
    /// Factors are rebalanced so every axis factor has unit RMS; the scale of
    /// each term lives in its coefficient factor.
    pub fn identity_init(dims: Grid4Dims, rank: usize, init: &IdentityInit) -> Result<Self> {
        Self::validate(dims, rank)?;
        if !(init.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise scale must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let cells = dims.cell_count();
        let mut data = Vec::with_capacity(cells * COEFFS_PER_CELL);
        for _ in 0..cells {
            for &v in &AffineTransform::IDENTITY.0 {
                let noise = if init.noise_scale > 0.0 {
                    rng.gen_range(-init.noise_scale..=init.noise_scale)
                } else {
                    0.0
                };
                data.push(v + noise);
            }
        }
        let tensor = DenseTensor::new(vec![dims.depth, dims.width, dims.height, dims.guide, COEFFS_PER_CELL], data)?;
        let als = AlsOptions {
            seed: init.seed.wrapping_add(1),
            ..init.als
        };
        let cp = cp_als(&tensor, rank, &als)?;
        log::debug!("identity init: rank {rank}, rel error {:.3e}", cp.rel_error);

        let mut grid = Self::identity(dims, rank)?;
        for r in 0..rank {
            let mut scale = cp.weights[r];
            for f in 0..4 {
                let len = dims.family_len(f);
                let col: Vec<f64> = (0..len).map(|i| cp.factors[f][i * rank + r]).collect();
                let sign = if col.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
                let rms_norm = (len as f64).sqrt();
                scale *= sign / rms_norm;
                for (dst, v) in grid.factor_mut(f, r).iter_mut().zip(&col) {
                    *dst = v * sign * rms_norm;
                }
            }
            for (e, dst) in grid.factor_mut(FAMILY_COEFF, r).iter_mut().enumerate() {
                *dst = scale * cp.factors[FAMILY_COEFF][e * rank + r];
            }
        }
        if grid.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decomposition("non-finite factors after rebalancing".into()));
        }
        Ok(grid)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, guidance: Option<&MlpGuidance>) -> Result<()> {
        w.write_all(GRID4_MAGIC)?;
        io::write_u32(w, GRID4_VERSION)?;
        let d = self.dims;
        for v in [d.depth, d.width, d.height, d.guide, self.rank] {
            io::write_u32(w, v as u32)?;
        }
        io::write_f32s(w, self.params.iter().copied())?;
        match guidance {
            Some(mlp) => {
                io::write_u32(w, 1)?;
                io::write_f32s(w, mlp.to_params())?;
            }
            None => io::write_u32(w, 0)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, Option<MlpGuidance>)> {
        io::expect_magic(r, GRID4_MAGIC)?;
        io::expect_version(r, GRID4_VERSION)?;
        let depth = io::dim(io::read_u32(r)?, "depth")?;
        let width = io::dim(io::read_u32(r)?, "width")?;
        let height = io::dim(io::read_u32(r)?, "height")?;
        let guide = io::dim(io::read_u32(r)?, "guide")?;
        let rank = io::dim(io::read_u32(r)?, "rank")?;
        let dims = Grid4Dims::new(depth, width, height, guide);
        let (_, total) = Self::layout(dims, rank);
        let params = io::read_f32s(r, total)?;
        let guidance = match io::read_u32(r)? {
            0 => None,
            1 => Some(MlpGuidance::from_params(&io::read_f32s(r, MlpGuidance::PARAM_COUNT)?)),
            other => return Err(Error::Format(format!("bad guidance flag {other}"))),
        };
        io::expect_eof(r)?;
        Ok((Self::from_params(dims, rank, params)?, guidance))
    }

    /// Writes the `BGR4` container and a `.json` sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>, guidance: Option<&MlpGuidance>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, guidance)?;
        w.flush()?;
        let families = ["z", "x", "y", "guide", "coeff"];
        let mut factors = serde_json::Map::new();
        for (f, name) in families.iter().enumerate() {
            let per_rank: Vec<Vec<f32>> = (0..self.rank)
                .map(|r| self.factor(f, r).iter().map(|&v| v as f32).collect())
                .collect();
            factors.insert(name.to_string(), serde_json::json!(per_rank));
        }
        let sidecar = serde_json::json!({
            "format": "BGR4",
            "version": GRID4_VERSION,
            "dims": self.dims,
            "rank": self.rank,
            "factors": factors,
            "guidance": guidance.map(|m| m.to_params().into_iter().map(|v| v as f32).collect::<Vec<_>>()),
        });
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<MlpGuidance>)> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
