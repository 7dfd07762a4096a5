//! Run configuration and ablation grid files (TOML).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignreg::{AlignConfig, ProjectorConfig};
use crate::error::{Error, Result};
use crate::pointenc::{make_dataset, Dataset, ShapeKind};
use crate::probes::{ProbeConfig, Sweep};
use crate::stack::StackConfig;
use crate::trainer::StagePlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: Vec<ShapeKind>,
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            per_class: 20,
            points: 256,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<Dataset> {
        make_dataset(&self.classes, self.per_class, self.points, self.seed)
    }
}

/// Every knob of a run. Missing sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: String,
    /// Model seed for Stage-1 initialization.
    pub seed: u64,
    pub data: DataConfig,
    pub model: StackConfig,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
    pub align: AlignConfig,
    pub projector: ProjectorConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: "run".into(),
            seed: 0,
            data: DataConfig::default(),
            model: StackConfig::default(),
            stage1: StagePlan::stage1(),
            stage2: StagePlan::stage2(),
            align: AlignConfig::default(),
            projector: ProjectorConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        m.lm.vocab = m.lm.vocab.max(1);
        m.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.align.validate(self.model.lm.layers)?;
        if !(1..=4).contains(&self.projector.depth) {
            return Err(Error::Config(format!("projector depth must be 1..=4, got {}", self.projector.depth)));
        }
        self.probe.resolved_layers(self.model.lm.layers)?;
        Ok(())
    }
}

/// Ablation grid file: named sweeps and/or a training-fraction sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Training fractions for the two-arm data sweep.
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub sweep: Vec<Sweep>,
}

impl GridFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let g: GridFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if g.sweep.is_empty() && g.fractions.is_empty() {
            return Err(Error::Config("grid defines neither `sweep` nor `fractions`".into()));
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignreg::AlignMetric;
    use crate::trainer::LayerSel;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let c = RunConfig::from_toml("run = \"x\"\n[align]\nlambda = 0.3\nlayer = 5\nmetric = \"l2\"\ntarget = \"qformer\"\n").unwrap();
        assert_eq!(c.align.lambda, 0.3);
        assert_eq!(c.align.metric, AlignMetric::L2);
        assert_eq!(c.stage2, StagePlan::stage2());
        let err = RunConfig::from_toml("[align]\nlambdaa = 1\n").unwrap_err().to_string();
        assert!(err.contains("lambdaa"), "{err}");
    }

    #[test]
    fn grid_parses_mixed_layer_axis() {
        let g = GridFile::from_toml("seeds = [0, 1]\n[[sweep]]\nname = \"layer\"\nlayer = [2, 4, [3, 4, 5]]\n").unwrap();
        assert_eq!(g.sweep[0].layer, vec![LayerSel::One(2), LayerSel::One(4), LayerSel::Many(vec![3, 4, 5])]);
        let err = GridFile::from_toml("[[sweep]]\nname = \"x\"\nlamda = [0.1]\n").unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
        assert!(GridFile::from_toml("seeds = [1]\n").is_err());
    }
}
