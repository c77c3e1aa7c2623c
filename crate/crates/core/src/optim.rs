//! Adam over named parameter blocks, and the finite-difference gradient
//! checker used by every backward pass in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays every block's rate to zero at `total_steps`.
    Cosine { total_steps: usize },
}

impl LrSchedule {
    fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { total_steps } => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Blocks are registered once and then stepped
/// together in registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    blocks: Vec<Block>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            blocks: Vec::new(),
            step: 0,
        }
    }

    /// Registers a block and returns its index.
    pub fn add_block(&mut self, name: impl Into<String>, len: usize, lr: f64) -> usize {
        self.blocks.push(Block {
            name: name.into(),
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        self.blocks.len() - 1
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn block_names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.name.as_str())
    }

    pub fn moments(&self, block: usize) -> (&[f64], &[f64]) {
        let b = &self.blocks[block];
        (&b.m, &b.v)
    }

    /// Applies one update to every block. A non-finite gradient anywhere
    /// skips the whole step (no parameter or moment changes) and is reported.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.blocks.len() || grads.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer has {} blocks, got {} parameter and {} gradient blocks",
                self.blocks.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((block, p), g) in self.blocks.iter().zip(params.iter()).zip(grads) {
            if p.len() != block.m.len() || g.len() != block.m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "block `{}` expects {} values, got {} parameters and {} gradients",
                    block.name,
                    block.m.len(),
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: block.name.clone(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            schedule,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = schedule.factor(self.step - 1);
        for ((block, p), g) in self.blocks.iter_mut().zip(params.iter_mut()).zip(grads) {
            let lr = block.lr * decay;
            for i in 0..p.len() {
                let gi = g[i];
                let m = beta1 * block.m[i] + (1.0 - beta1) * gi;
                let v = beta2 * block.v[i] + (1.0 - beta2) * gi * gi;
                block.m[i] = m;
                block.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Up to five worst coordinates, worst first.
    pub worst: Vec<GradMismatch>,
}

/// Magnitude below which gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences `(f(x+h) - f(x-h)) / 2h`
/// on every coordinate.
pub fn check_gradients<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    check_gradients_at(f, params, analytic, h, &all)
}

/// As [`check_gradients`], restricted to `indices`.
pub fn check_gradients_at<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    indices: &[usize],
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut mismatches = Vec::with_capacity(indices.len());
    let mut max_abs: f64 = 0.0;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        max_abs = max_abs.max(abs);
        mismatches.push(GradMismatch {
            index: i,
            analytic: a,
            numeric,
            rel_error: if rel.is_nan() { f64::INFINITY } else { rel },
        });
    }
    mismatches.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let max_rel_error = mismatches.first().map_or(0.0, |m| m.rel_error);
    mismatches.truncate(5);
    GradCheckReport {
        max_rel_error,
        max_abs_error: max_abs,
        checked: indices.len(),
        worst: mismatches,
    }
}
