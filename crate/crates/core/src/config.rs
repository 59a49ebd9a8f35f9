//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::loss::{LossFlags, LossWeights, LOSS_MASK_THRESHOLD};
use crate::nn::ModelConfig;
use crate::predictor::PredictorFlags;
use crate::sim::FlowScenario;

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dt: f64,
    pub frames: usize,
    pub count: usize,
    /// Records cycle through these scenarios in order.
    pub scenarios: Vec<FlowScenario>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            dx: 1.0,
            dt: 1.0,
            frames: 16,
            count: 300,
            scenarios: vec![
                FlowScenario::uniform(0.5, 0.0, 0.02, 1),
                FlowScenario::uniform(0.5, std::f64::consts::PI, 0.02, 2),
            ],
        }
    }
}

impl GenerateConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.height, self.width, self.dx, self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Rollout steps per training sample.
    pub train_horizon: usize,
    /// Rollout steps for evaluation; may exceed the training horizon.
    pub test_horizon: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip applied before each optimizer step.
    pub max_grad_norm: Option<f64>,
    /// Optional cap on optimizer steps per epoch; batches are drawn from a
    /// fresh shuffle each epoch.
    pub batches_per_epoch: Option<usize>,
    /// Fractions of sequences used for training and validation; the rest is held out.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 1e-3,
            lr_step: 30,
            lr_gamma: 0.5,
            train_horizon: 4,
            test_horizon: 10,
            seed: 0,
            adam: AdamConfig::default(),
            max_grad_norm: None,
            batches_per_epoch: None,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Cells with distance at most this are left out of every loss mean.
    pub exclude_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            exclude_threshold: LOSS_MASK_THRESHOLD,
        }
    }
}

/// Every switch used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_physical: bool,
    pub no_temporal: bool,
    pub no_momentum: bool,
    pub no_correction: bool,
    pub changed_operator: bool,
    pub replace_mid: bool,
    pub literal_sign: bool,
    pub unmasked: bool,
}

impl AblationFlags {
    pub fn predictor(&self) -> PredictorFlags {
        PredictorFlags {
            replace_mid: self.replace_mid,
            changed_operator: self.changed_operator,
            no_correction: self.no_correction,
            unmasked: self.unmasked,
        }
    }

    pub fn loss(&self) -> LossFlags {
        LossFlags {
            no_physical: self.no_physical,
            no_temporal: self.no_temporal,
            no_momentum: self.no_momentum,
            literal_sign: self.literal_sign,
        }
    }

    /// Names of the switches that are on.
    pub fn active(&self) -> Vec<&'static str> {
        [
            ("no-physical", self.no_physical),
            ("no-temporal", self.no_temporal),
            ("no-e1", self.no_momentum),
            ("no-correction", self.no_correction),
            ("changed-operator", self.changed_operator),
            ("replace-c", self.replace_mid),
            ("literal-sign", self.literal_sign),
            ("unmasked", self.unmasked),
        ]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| n)
        .collect()
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Normal,
    NoPhysical,
    NoTemporal,
    NoMomentum,
    NoCorrection,
    ChangedOperator,
    ReplaceMid,
    LiteralSign,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Normal,
        Ablation::NoPhysical,
        Ablation::NoTemporal,
        Ablation::NoMomentum,
        Ablation::NoCorrection,
        Ablation::ChangedOperator,
        Ablation::ReplaceMid,
        Ablation::LiteralSign,
    ];

    /// Command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Normal => "normal",
            Ablation::NoPhysical => "no-physical",
            Ablation::NoTemporal => "no-temporal",
            Ablation::NoMomentum => "no-e1",
            Ablation::NoCorrection => "no-correction",
            Ablation::ChangedOperator => "changed-operator",
            Ablation::ReplaceMid => "replace-c",
            Ablation::LiteralSign => "literal-sign",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Normal => "Normal",
            Ablation::NoPhysical => "no Physical Constraint",
            Ablation::NoTemporal => "no Temporal Constraint",
            Ablation::NoMomentum => "no Velocity-Pressure Constraint",
            Ablation::NoCorrection => "no Correction Network",
            Ablation::ChangedOperator => "changing Discrete PDEs",
            Ablation::ReplaceMid => "replacing c(t') with c(t_k)",
            Ablation::LiteralSign => "printed e1 sign",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!(
                    "unknown ablation `{name}`; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    pub fn apply(self, flags: &mut AblationFlags) {
        match self {
            Ablation::Normal => {}
            Ablation::NoPhysical => flags.no_physical = true,
            Ablation::NoTemporal => flags.no_temporal = true,
            Ablation::NoMomentum => flags.no_momentum = true,
            Ablation::NoCorrection => flags.no_correction = true,
            Ablation::ChangedOperator => flags.changed_operator = true,
            Ablation::ReplaceMid => flags.replace_mid = true,
            Ablation::LiteralSign => flags.literal_sign = true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenerateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    /// Dataset used by `train` and friends when no path is given on the command line.
    pub dataset: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        let t = &self.train;
        if t.train_horizon == 0 || t.test_horizon == 0 {
            return Err(Error::Config(
                "train.train_horizon and train.test_horizon must be at least 1".into(),
            ));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0) || t.lr_step == 0 || !(t.lr_gamma > 0.0 && t.lr_gamma <= 1.0) {
            return Err(Error::Config(
                "need train.lr > 0, train.lr_step >= 1, 0 < train.lr_gamma <= 1".into(),
            ));
        }
        if !(t.train_fraction > 0.0
            && t.val_fraction >= 0.0
            && t.train_fraction + t.val_fraction <= 1.0)
        {
            return Err(Error::Config(
                "split fractions must be positive and sum to at most 1".into(),
            ));
        }
        if !(self.loss.exclude_threshold > 0.0) {
            return Err(Error::Config(
                "loss.exclude_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.model.window, 4);
        assert_eq!((cfg.train.lr_step, cfg.train.lr_gamma), (30, 0.5));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_partial_sections() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml(
            "[train]\nepochs = 3\n[ablation]\nno_temporal = true\n[[generate.scenarios]]\nkind = \"vortex\"\nmagnitude = 0.3\ninv_pe = 0.01\nseed = 4\n[generate.scenarios.obstacles]\ntype = \"random_disk\"\nradius = 2.0\n",
        )
        .unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.lr, 1e-3);
        assert!(partial.ablation.no_temporal);
        assert_eq!(partial.generate.scenarios.len(), 1);
        assert!(RunConfig::from_toml("[train]\nepocs = 3\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn ablation_names() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::ALL
            .iter()
            .any(|a| a.label() == "no Temporal Constraint"));
        let mut f = AblationFlags::default();
        Ablation::NoTemporal.apply(&mut f);
        assert_eq!(f.active(), vec!["no-temporal"]);
        assert!(Ablation::parse("bogus").is_err());
    }
}
