use std::path::{Path, PathBuf};

use bilagrid::pipeline::{IspConfig, LiftConfig, StageOneConfig, SyntheticConfig};
use bilagrid::RenderOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One JSON document configuring every command. All sections are optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub isp: IspConfig,
    pub render: RenderOptions,
    pub stage_one: StageOneConfig,
    pub lift: LiftConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: bilagrid::Error| CliError::Config(e.to_string());
        self.synthetic.validate().map_err(cfg)?;
        self.isp.validate().map_err(cfg)?;
        self.stage_one.validate().map_err(cfg)?;
        self.lift.validate().map_err(cfg)?;
        if self.render.samples == 0 {
            return Err(CliError::Config("render.samples must be positive".into()));
        }
        Ok(())
    }
}
