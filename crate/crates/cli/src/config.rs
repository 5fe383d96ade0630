//! Pipeline configuration file.

use std::fs;
use std::path::Path;

use paedid::addressing::AddressingParams;
use paedid::bank::CoresetConfig;
use paedid::decomposition::DecompParams;
use paedid::nn::{ArchSpec, TrainConfig};
use paedid::synth::{DefectConfig, Style, SynthConfig};
use paedid::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub style: Style,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub defect: DefectConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            style: Style::Grain,
            n_train: 200,
            n_test: 20,
            image_size: 64,
            defect: DefectConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            style: self.style,
            image_size: self.image_size,
            defect: self.defect,
        }
    }
}

/// Encoder stages plus an optional fixed input size; unset dimensions are
/// taken from the training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub stages: Vec<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stages: vec![64, 128],
            height: None,
            width: None,
            channels: None,
        }
    }
}

impl ArchConfig {
    /// Resolves against the shape of the training images.
    pub fn resolve(&self, shape: (usize, usize, usize)) -> Result<ArchSpec> {
        let arch = ArchSpec::new(
            self.height.unwrap_or(shape.0),
            self.width.unwrap_or(shape.1),
            self.channels.unwrap_or(shape.2),
            self.stages.clone(),
        )?;
        if (arch.height, arch.width, arch.channels) != shape {
            return Err(Error::Shape(format!(
                "configured input {}x{}x{} but images are {}x{}x{}",
                arch.height, arch.width, arch.channels, shape.0, shape.1, shape.2
            )));
        }
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AddressingConfig {
    pub l: usize,
    pub k: usize,
    pub alpha: f64,
    pub aligned: bool,
}

impl Default for AddressingConfig {
    fn default() -> Self {
        AddressingConfig {
            l: 7,
            k: 13,
            alpha: 0.3,
            aligned: false,
        }
    }
}

impl AddressingConfig {
    pub fn params(&self) -> AddressingParams {
        AddressingParams {
            k: self.k,
            alpha: self.alpha,
            aligned: self.aligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub addressing: AddressingConfig,
    pub decomposition: DecompParams,
    pub coreset: Option<CoresetConfig>,
    pub threshold: Option<f64>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth().validate()?;
        self.train.validate()?;
        self.addressing.params().validate()?;
        if self.addressing.l == 0 || self.addressing.l.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "aggregation length l must be odd, got {}",
                self.addressing.l
            )));
        }
        self.decomposition.validate()?;
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {t}")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(DEFAULT_THRESHOLD)
    }

    /// Applies a global `--seed` to every seeded stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        if let Some(c) = &mut self.coreset {
            c.seed = seed;
        }
    }
}
