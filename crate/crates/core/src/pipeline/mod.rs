//! Experiment drivers: dataset synthesis, the joint per-view grid fit,
//! lifting a single-view edit into a 4D grid, and evaluation helpers.

pub mod dataset;
pub mod edits;
pub mod isp;
pub mod stage_one;
pub mod stage_two;
pub mod synthetic;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossReport;
use crate::metrics::{evaluate, MetricsTable};

pub use dataset::{fit_views, synthesize_dataset, FitView, ViewRecord};
pub use isp::{IspConfig, IspOp};
pub use stage_one::{fit_stage_one, reapply_processing, FootprintOperator, StageOneConfig, StageOneResult};
pub use stage_two::{lift_edit, render_finished, LiftConfig, LiftResult};
pub use synthetic::{synthetic_setup, SyntheticConfig, SyntheticSetup};

/// A run aborts once the loss exceeds `ratio · (initial + 1)`.
pub const DEFAULT_DIVERGENCE_RATIO: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub data_term: f64,
    pub tv_term: f64,
}

impl LossRecord {
    pub fn new(step: usize, r: &LossReport) -> Self {
        Self {
            step,
            total: r.total,
            data_term: r.data_term,
            tv_term: r.tv_term,
        }
    }
}

pub fn write_history_csv<W: Write>(w: W, history: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for rec in history {
        out.serialize(rec)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) struct DivergenceGuard {
    ratio: f64,
    initial: Option<f64>,
}

impl DivergenceGuard {
    pub(crate) fn new(ratio: f64) -> Self {
        Self { ratio, initial: None }
    }

    pub(crate) fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > self.ratio * (initial + 1.0) {
            return Err(Error::Divergence { step, loss });
        }
        Ok(())
    }
}

/// Metrics of each prediction against its reference, named `view_<id>`.
pub fn evaluate_views(preds: &[Image], refs: &[Image], ids: &[usize]) -> Result<MetricsTable> {
    if preds.len() != refs.len() || preds.len() != ids.len() {
        return Err(Error::ShapeMismatch("prediction, reference and id counts differ".into()));
    }
    let mut table = MetricsTable::default();
    for ((p, r), id) in preds.iter().zip(refs).zip(ids) {
        table.push(format!("view_{id:03}"), evaluate(p, r, false)?);
    }
    Ok(table)
}
