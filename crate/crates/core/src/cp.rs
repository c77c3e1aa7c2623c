//! CP (PARAFAC) decomposition of dense tensors by alternating least squares.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major N-way tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 || data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mode-`n` unfolding as an `shape[n] × (len / shape[n])` matrix.
    pub fn unfold(&self, mode: usize) -> DMatrix<f64> {
        let rows = self.shape[mode];
        let cols = self.data.len() / rows;
        let inner: usize = self.shape[mode + 1..].iter().product();
        let mut m = DMatrix::zeros(rows, cols);
        for (flat, &v) in self.data.iter().enumerate() {
            let i = (flat / inner) % rows;
            let outer = flat / (inner * rows);
            m[(i, outer * inner + flat % inner)] = v;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlsOptions {
    pub max_iters: usize,
    /// Stop when the fit improves by less than this between sweeps.
    pub tol: f64,
    pub restarts: usize,
    /// Tikhonov damping on the normal equations.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            restarts: 3,
            ridge: 1e-9,
            seed: 0,
        }
    }
}

/// Kruskal tensor `Σ_r λ_r a_r^(1) ⊗ … ⊗ a_r^(N)` with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct CpDecomposition {
    pub rank: usize,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    /// `factors[n]` is `shape[n] × rank`, row-major.
    pub factors: Vec<Vec<f64>>,
    /// `‖X − X̂‖ / ‖X‖` against the decomposed tensor.
    pub rel_error: f64,
    pub iterations: usize,
    /// Relative error of every restart, in order.
    pub restart_errors: Vec<f64>,
}

impl CpDecomposition {
    pub fn reconstruct(&self) -> DenseTensor {
        let total: usize = self.shape.iter().product();
        let mut data = vec![0.0; total];
        let mut idx = vec![0usize; self.shape.len()];
        for v in data.iter_mut() {
            let mut acc = 0.0;
            for r in 0..self.rank {
                let mut p = self.weights[r];
                for (n, &i) in idx.iter().enumerate() {
                    p *= self.factors[n][i * self.rank + r];
                }
                acc += p;
            }
            *v = acc;
            increment(&mut idx, &self.shape);
        }
        DenseTensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for n in (0..idx.len()).rev() {
        idx[n] += 1;
        if idx[n] < shape[n] {
            return;
        }
        idx[n] = 0;
    }
}

/// Matricized tensor times Khatri-Rao product for `mode`: the
/// `shape[mode] × rank` matrix `X_(n) (⊙_{m≠n} A_m)`.
fn mttkrp(x: &DenseTensor, factors: &[Vec<f64>], rank: usize, mode: usize) -> Vec<f64> {
    let shape = &x.shape;
    let nmodes = shape.len();
    let mut out = vec![0.0; shape[mode] * rank];
    let mut idx = vec![0usize; nmodes];
    // Trailing modes vary fastest; cache the product of all non-target
    // factors over the leading modes and sweep the last axis in the inner loop.
    let last = nmodes - 1;
    let last_len = shape[last];
    let mut prefix = vec![0.0; rank];
    let outer_count = x.data.len() / last_len;
    for outer in 0..outer_count {
        prefix.iter_mut().for_each(|p| *p = 1.0);
        for n in 0..last {
            if n == mode {
                continue;
            }
            let row = &factors[n][idx[n] * rank..(idx[n] + 1) * rank];
            for r in 0..rank {
                prefix[r] *= row[r];
            }
        }
        let slab = &x.data[outer * last_len..(outer + 1) * last_len];
        if mode == last {
            for (i, &v) in slab.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let dst = &mut out[i * rank..(i + 1) * rank];
                for r in 0..rank {
                    dst[r] += v * prefix[r];
                }
            }
        } else {
            let fl = &factors[last];
            let dst = &mut out[idx[mode] * rank..(idx[mode] + 1) * rank];
            for (i, &v) in slab.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let row = &fl[i * rank..(i + 1) * rank];
                for r in 0..rank {
                    dst[r] += v * prefix[r] * row[r];
                }
            }
        }
        // advance the leading modes
        for n in (0..last).rev() {
            idx[n] += 1;
            if idx[n] < shape[n] {
                break;
            }
            idx[n] = 0;
        }
    }
    out
}

fn gram(factor: &[f64], rows: usize, rank: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(rank, rank);
    for i in 0..rows {
        let row = &factor[i * rank..(i + 1) * rank];
        for a in 0..rank {
            for b in 0..rank {
                g[(a, b)] += row[a] * row[b];
            }
        }
    }
    g
}

struct Run {
    weights: Vec<f64>,
    factors: Vec<Vec<f64>>,
    rel_error: f64,
    iterations: usize,
}

fn als_run(x: &DenseTensor, rank: usize, opts: &AlsOptions, rng: &mut ChaCha8Rng) -> Result<Run> {
    let shape = &x.shape;
    let nmodes = shape.len();
    let norm_x = x.norm();
    let mut factors: Vec<Vec<f64>> = shape
        .iter()
        .map(|&len| (0..len * rank).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mut grams: Vec<DMatrix<f64>> = (0..nmodes).map(|n| gram(&factors[n], shape[n], rank)).collect();
    let mut weights = vec![1.0; rank];
    let mut fit = 0.0;
    let mut rel_error = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let mut last_mttkrp = Vec::new();
        for n in 0..nmodes {
            let m = mttkrp(x, &factors, rank, n);
            let mut v = DMatrix::from_element(rank, rank, 1.0);
            for (k, g) in grams.iter().enumerate() {
                if k != n {
                    v.component_mul_assign(g);
                }
            }
            for r in 0..rank {
                v[(r, r)] += opts.ridge;
            }
            let chol = v
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Decomposition("normal equations not positive definite".into()))?;
            let rows = shape[n];
            let mut updated = vec![0.0; rows * rank];
            for i in 0..rows {
                let rhs = DVector::from_column_slice(&m[i * rank..(i + 1) * rank]);
                let sol = chol.solve(&rhs);
                updated[i * rank..(i + 1) * rank].copy_from_slice(sol.as_slice());
            }
            for r in 0..rank {
                let norm = (0..rows).map(|i| updated[i * rank + r].powi(2)).sum::<f64>().sqrt();
                weights[r] = norm;
                if norm > 0.0 {
                    for i in 0..rows {
                        updated[i * rank + r] /= norm;
                    }
                }
            }
            if updated.iter().any(|v| !v.is_finite()) {
                return Err(Error::Decomposition("non-finite factors".into()));
            }
            grams[n] = gram(&updated, rows, rank);
            factors[n] = updated;
            if n == nmodes - 1 {
                last_mttkrp = m;
            }
        }

        // ‖X − X̂‖² = ‖X‖² − 2⟨X, X̂⟩ + ‖X̂‖²
        let last = nmodes - 1;
        let mut inner = 0.0;
        for i in 0..shape[last] {
            for r in 0..rank {
                inner += weights[r] * factors[last][i * rank + r] * last_mttkrp[i * rank + r];
            }
        }
        let mut had = DMatrix::from_element(rank, rank, 1.0);
        for g in &grams {
            had.component_mul_assign(g);
        }
        let w = DVector::from_column_slice(&weights);
        let model_sq = (w.transpose() * &had * &w)[(0, 0)];
        let resid = (norm_x * norm_x - 2.0 * inner + model_sq).max(0.0).sqrt();
        rel_error = if norm_x > 0.0 { resid / norm_x } else { resid };
        let new_fit = 1.0 - rel_error;
        let converged = iter > 0 && (new_fit - fit).abs() < opts.tol;
        fit = new_fit;
        if converged {
            break;
        }
    }
    if !rel_error.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Decomposition("non-finite fit".into()));
    }
    Ok(Run {
        weights,
        factors,
        rel_error,
        iterations,
    })
}

/// Rank-`rank` CP-ALS with random restarts; returns the best restart.
pub fn cp_als(x: &DenseTensor, rank: usize, opts: &AlsOptions) -> Result<CpDecomposition> {
    if rank == 0 {
        return Err(Error::InvalidArgument("CP rank must be at least 1".into()));
    }
    let mut best: Option<Run> = None;
    let mut restart_errors = Vec::with_capacity(opts.restarts);
    let mut last_err = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(restart as u64);
        match als_run(x, rank, opts, &mut rng) {
            Ok(run) => {
                log::debug!("cp-als restart {restart}: rel error {:.3e} after {} sweeps", run.rel_error, run.iterations);
                restart_errors.push(run.rel_error);
                if best.as_ref().map_or(true, |b| run.rel_error < b.rel_error) {
                    best = Some(run);
                }
            }
            Err(e) => {
                restart_errors.push(f64::INFINITY);
                last_err = Some(e);
            }
        }
    }
    let best = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Decomposition("no restarts".into())))?;
    Ok(CpDecomposition {
        rank,
        shape: x.shape.clone(),
        weights: best.weights,
        factors: best.factors,
        rel_error: best.rel_error,
        iterations: best.iterations,
        restart_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rank_r_tensor(shape: &[usize], rank: usize, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cp = CpDecomposition {
            rank,
            shape: shape.to_vec(),
            weights: vec![1.0; rank],
            factors: shape.iter().map(|&l| (0..l * rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            rel_error: 0.0,
            iterations: 0,
            restart_errors: vec![],
        };
        cp.reconstruct()
    }

    #[test]
    fn mttkrp_matches_unfolding_times_khatri_rao() {
        let shape = [3, 4, 2, 5];
        let x = random_tensor(&shape, 1);
        let rank = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let factors: Vec<Vec<f64>> = shape.iter().map(|&l| (0..l * rank).map(|_| rng.gen()).collect()).collect();
        for mode in 0..shape.len() {
            let got = mttkrp(&x, &factors, rank, mode);
            let unfolded = x.unfold(mode);
            // Khatri-Rao of the remaining modes in row-major order
            let others: Vec<usize> = (0..shape.len()).filter(|&m| m != mode).collect();
            let cols = unfolded.ncols();
            let mut kr = DMatrix::zeros(cols, rank);
            let mut idx = vec![0usize; others.len()];
            let oshape: Vec<usize> = others.iter().map(|&m| shape[m]).collect();
            for row in 0..cols {
                for r in 0..rank {
                    kr[(row, r)] = others.iter().zip(&idx).map(|(&m, &i)| factors[m][i * rank + r]).product();
                }
                increment(&mut idx, &oshape);
            }
            let want = unfolded * kr;
            for i in 0..shape[mode] {
                for r in 0..rank {
                    assert!((got[i * rank + r] - want[(i, r)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn recovers_exact_low_rank_tensor() {
        let x = rank_r_tensor(&[5, 4, 6], 2, 3);
        let cp = cp_als(&x, 2, &AlsOptions { max_iters: 500, tol: 1e-12, ..Default::default() }).unwrap();
        assert!(cp.rel_error < 1e-5, "{}", cp.rel_error);
        let back = cp.reconstruct();
        let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / x.norm();
        assert!((err - cp.rel_error).abs() < 1e-6);
    }

    #[test]
    fn best_restart_is_returned() {
        let x = random_tensor(&[4, 4, 3], 4);
        let cp = cp_als(&x, 2, &AlsOptions::default()).unwrap();
        let best = cp.restart_errors.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(cp.restart_errors.len(), 3);
        assert!(cp.rel_error <= 2.0 * best);
        assert_eq!(cp.rel_error, best);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let x = random_tensor(&[2, 2], 5);
        assert!(cp_als(&x, 0, &AlsOptions::default()).is_err());
    }
}
