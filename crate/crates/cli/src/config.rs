//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use mionet::model::ModelConfig;
use mionet::oracle::{FluidProperties, GeometrySpec};
use mionet::training::TrainConfig;
use mionet::{Error, InputRanges, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub n1: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n1: m.n1,
            branch_hidden: m.branch_hidden,
            trunk_hidden: m.trunk_hidden,
            dropout_rate: m.dropout_rate,
        }
    }
}

impl ModelSection {
    pub fn for_nodes(&self, n_nodes: usize) -> ModelConfig {
        ModelConfig {
            n1: self.n1,
            n_scalar: 2,
            branch_hidden: self.branch_hidden.clone(),
            trunk_hidden: self.trunk_hidden.clone(),
            n_nodes,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub samples: usize,
    pub mesh_nodes: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 5000,
            mesh_nodes: 1733,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSection {
    pub test_fraction: f64,
    /// Share of the training partition held out to stop the final model.
    pub holdout_fraction: f64,
    pub cross_validate: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            holdout_fraction: 0.1,
            cross_validate: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: GeometrySpec,
    pub fluid: FluidProperties,
    pub ranges: InputRanges,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
}

pub const KEYS: &[&str] = &[
    "geometry.pitch",
    "geometry.rod_diameter",
    "geometry.length",
    "fluid.density",
    "fluid.dynamic_viscosity",
    "fluid.specific_heat",
    "fluid.thermal_conductivity",
    "ranges.p_max",
    "ranges.t_in",
    "ranges.v_in",
    "data.samples",
    "data.mesh_nodes",
    "data.seed",
    "model.n1",
    "model.branch_hidden",
    "model.trunk_hidden",
    "model.dropout_rate",
    "train.learning_rate",
    "train.l2_lambda",
    "train.max_epochs",
    "train.patience",
    "train.batch_size",
    "train.folds",
    "train.seed",
    "split.test_fraction",
    "split.holdout_fraction",
    "split.cross_validate",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse `{value}` for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match value.split(',').map(str::trim).collect::<Vec<_>>()[..] {
        [lo, hi] => Ok((parse(key, lo)?, parse(key, hi)?)),
        _ => Err(Error::InvalidArgument(format!("{key} expects `lo,hi`, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "geometry.pitch" => self.geometry.pitch = parse(key, v)?,
            "geometry.rod_diameter" => self.geometry.rod_diameter = parse(key, v)?,
            "geometry.length" => self.geometry.length = parse(key, v)?,
            "fluid.density" => self.fluid.density = parse(key, v)?,
            "fluid.dynamic_viscosity" => self.fluid.dynamic_viscosity = parse(key, v)?,
            "fluid.specific_heat" => self.fluid.specific_heat = parse(key, v)?,
            "fluid.thermal_conductivity" => self.fluid.thermal_conductivity = parse(key, v)?,
            "ranges.p_max" => self.ranges.p_max = parse_pair(key, v)?,
            "ranges.t_in" => self.ranges.t_in = parse_pair(key, v)?,
            "ranges.v_in" => self.ranges.v_in = parse_pair(key, v)?,
            "data.samples" => self.data.samples = parse(key, v)?,
            "data.mesh_nodes" => self.data.mesh_nodes = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.n1" => self.model.n1 = parse(key, v)?,
            "model.branch_hidden" => self.model.branch_hidden = parse_list(key, v)?,
            "model.trunk_hidden" => self.model.trunk_hidden = parse_list(key, v)?,
            "model.dropout_rate" => self.model.dropout_rate = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.l2_lambda" => self.train.l2_lambda = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.folds" => self.train.k_folds = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "split.test_fraction" => self.split.test_fraction = parse(key, v)?,
            "split.holdout_fraction" => self.split.holdout_fraction = parse(key, v)?,
            "split.cross_validate" => self.split.cross_validate = parse(key, v)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("{source}:{}: expected `key = value`, got `{line}`", no + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::InvalidArgument(format!("{source}:{}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then each `key=value` in `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.fluid.validate()?;
        self.ranges.validate()?;
        self.train.validate()?;
        for (name, f) in [("split.test_fraction", self.split.test_fraction), ("split.holdout_fraction", self.split.holdout_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} = {f} must be in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_published_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.l2_lambda, 1e-8);
        assert_eq!(c.train.k_folds, 5);
        assert_eq!(c.train.max_epochs, 500);
        assert_eq!(c.data.samples, 5000);
        assert_eq!(c.data.mesh_nodes, 1733);
        assert_eq!(c.model.branch_hidden, vec![512, 512, 512]);
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                k if k.starts_with("ranges.") => "1,2",
                k if k.ends_with("_hidden") => "4,4",
                "split.cross_validate" => "false",
                _ => "1",
            };
            c.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\ntrain.max_epochs = 7\nmodel.trunk_hidden = 8, 8  # inline\n", "cfg").unwrap();
        assert_eq!(c.train.max_epochs, 7);
        assert_eq!(c.model.trunk_hidden, vec![8, 8]);
        c.set("train.max_epochs", "9").unwrap();
        assert_eq!(c.train.max_epochs, 9);
    }

    #[test]
    fn bad_lines_name_location() {
        let mut c = RunConfig::default();
        let e = c.apply_text("\nno equals sign\n", "f.cfg").unwrap_err().to_string();
        assert!(e.contains("f.cfg:2"), "{e}");
        let e = c.apply_text("bogus.key = 1", "f.cfg").unwrap_err().to_string();
        assert!(e.contains("bogus.key"), "{e}");
        assert!(c.set("train.patience", "ten").is_err());
        assert!(c.set("ranges.v_in", "4.0").is_err());
    }
}
