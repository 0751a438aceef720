//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pseudoclass::eval::DEFAULT_GAMMA;
use pseudoclass::network::{DEFAULT_FEATURE_DIM, DESK_FEATURE_DIM};
use pseudoclass::{ArchitectureSpec, InputGeometry, LayerSpec, TrainConfig};

/// Tradeoff values studied for λ.
pub const LAMBDA_GRID: [f64; 7] = [1e-7, 5e-7, 1e-6, 5e-6, 1e-5, 2e-5, 1e-4];
/// Pseudo-class counts studied on the scene dataset.
pub const CLASSES_GRID_SCENES: [f64; 5] = [2.0, 5.0, 10.0, 15.0, 21.0];
/// Pseudo-class counts studied on the coffee dataset.
pub const CLASSES_GRID_COFFEE: [f64; 7] = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainSection,
    pub arch: ArchConfig,
    pub data: SyntheticConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train: TrainSection::default(),
            arch: ArchConfig::default(),
            data: SyntheticConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// [`TrainConfig`] without the seed, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub num_pseudo_classes: usize,
    pub center_grad_scale: pseudoclass::CenterGradScale,
    pub warm_start_centers: bool,
    pub reseed_dead_centers: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lambda: d.lambda,
            learning_rate: d.learning_rate,
            iterations: d.iterations,
            batch_size: d.batch_size,
            num_pseudo_classes: d.num_pseudo_classes,
            center_grad_scale: d.center_grad_scale,
            warm_start_centers: d.warm_start_centers,
            reseed_dead_centers: d.reseed_dead_centers,
            checkpoint_every: d.checkpoint_every,
            log_every: d.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    /// Two small conv blocks and a 64-d feature layer.
    Desk,
    /// Layers listed in `arch.layers`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub preset: ArchPreset,
    /// Defaults to 64 for `desk` and 512 for `custom`.
    pub feature_dim: Option<usize>,
    /// Hidden layers for `custom`; the feature layer is appended.
    pub layers: Vec<LayerSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            preset: ArchPreset::Desk,
            feature_dim: None,
            layers: Vec::new(),
        }
    }
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or(match self.preset {
            ArchPreset::Desk => DESK_FEATURE_DIM,
            ArchPreset::Custom => DEFAULT_FEATURE_DIM,
        })
    }

    pub fn build(&self, input: InputGeometry, num_pseudo_classes: usize) -> Result<ArchitectureSpec> {
        let d = self.feature_dim();
        let spec = match self.preset {
            ArchPreset::Desk => {
                if !self.layers.is_empty() {
                    bail!("arch.layers is only used with preset = \"custom\"");
                }
                ArchitectureSpec::desk(input, d, num_pseudo_classes)
            }
            ArchPreset::Custom => {
                let mut layers = self.layers.clone();
                layers.push(LayerSpec::Fc { out: d });
                ArchitectureSpec {
                    input,
                    layers,
                    feature_dim: d,
                    num_pseudo_classes,
                }
            }
        };
        spec.resolve()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 5,
            per_class: 200,
            height: 16,
            width: 16,
            channels: 1,
            noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gamma: f64,
    pub folds: usize,
    /// Pick γ per fold by inner cross-validation instead of using `gamma`.
    pub tune_gamma: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gamma: DEFAULT_GAMMA,
            folds: 5,
            tune_gamma: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Lambda,
    NumPseudoClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GridPreset {
    /// The seven λ values of the tradeoff study.
    Lambda,
    /// {2, 5, 10, 15, 21} pseudo-classes.
    ClassesScenes,
    /// {2, …, 8} pseudo-classes.
    ClassesCoffee,
}

impl GridPreset {
    pub fn axis(self) -> SweepAxis {
        match self {
            GridPreset::Lambda => SweepAxis::Lambda,
            _ => SweepAxis::NumPseudoClasses,
        }
    }

    pub fn values(self) -> Vec<f64> {
        match self {
            GridPreset::Lambda => LAMBDA_GRID.to_vec(),
            GridPreset::ClassesScenes => CLASSES_GRID_SCENES.to_vec(),
            GridPreset::ClassesCoffee => CLASSES_GRID_COFFEE.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Lambda,
            grid: LAMBDA_GRID.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            iterations: t.iterations,
            batch_size: t.batch_size,
            num_pseudo_classes: t.num_pseudo_classes,
            center_grad_scale: t.center_grad_scale,
            warm_start_centers: t.warm_start_centers,
            reseed_dead_centers: t.reseed_dead_centers,
            seed: self.seed,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.eval.gamma > 0.0 && self.eval.gamma.is_finite()) {
            bail!("eval.gamma must be > 0, got {}", self.eval.gamma);
        }
        if self.eval.folds < 2 {
            bail!("eval.folds must be >= 2, got {}", self.eval.folds);
        }
        if self.arch.feature_dim() == 0 {
            bail!("arch.feature_dim must be positive");
        }
        Ok(())
    }

    /// Echo embedded in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nlambda = 0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.train.iterations, 10_000);
        assert_eq!(c.train_config().seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlamda = 1.0\n").is_err());
    }

    #[test]
    fn feature_dim_defaults_by_preset() {
        let mut a = ArchConfig::default();
        assert_eq!(a.feature_dim(), 64);
        a.preset = ArchPreset::Custom;
        assert_eq!(a.feature_dim(), 512);
        a.layers = vec![LayerSpec::Relu];
        let spec = a.build(InputGeometry::new(1, 4, 4), 3).unwrap();
        assert_eq!(spec.layers.last(), Some(&LayerSpec::Fc { out: 512 }));
    }

    #[test]
    fn presets_carry_the_study_grids() {
        assert_eq!(GridPreset::Lambda.values(), LAMBDA_GRID.to_vec());
        assert_eq!(GridPreset::ClassesCoffee.values().len(), 7);
        assert_eq!(GridPreset::ClassesScenes.axis(), SweepAxis::NumPseudoClasses);
    }
}
