//! Feature encoders and the three classifier architectures.

pub mod check;
mod encoder;
mod nets;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{BaseFeatures, Batch, EncoderSpec, FeatureEncoder, FeatureSource};
pub use nets::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "resnet")]
    ResNet,
    #[serde(rename = "ft-transformer", alias = "ft")]
    FtTransformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::Mlp, Self::ResNet, Self::FtTransformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::ResNet => "resnet",
            Self::FtTransformer => "ft-transformer",
        }
    }

    /// Column heading used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Mlp => "MLP",
            Self::ResNet => "ResNet",
            Self::FtTransformer => "FT-Transformer",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "resnet" => Ok(Self::ResNet),
            "ft" | "ft-transformer" | "fttransformer" => Ok(Self::FtTransformer),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderMode {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "llm", alias = "with-llm")]
    Llm,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 2] = [Self::Base, Self::Llm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Llm => "llm",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::Base),
            "llm" | "with-llm" => Ok(Self::Llm),
            other => Err(Error::Config(format!("unknown encoder mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterActivation {
    Relu,
    Linear,
}

/// How MLP and ResNet turn `[B, M, D]` tokens into a flat input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Flatten,
    Mean,
}

fn default_token_dim() -> usize {
    1024
}
fn default_heads() -> usize {
    8
}
fn default_layers() -> usize {
    4
}
fn default_hidden() -> Vec<usize> {
    vec![256, 128, 32]
}
fn default_activation() -> AdapterActivation {
    AdapterActivation::Relu
}
fn default_pooling() -> Pooling {
    Pooling::Flatten
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub encoder_mode: EncoderMode,
    #[serde(default = "default_token_dim")]
    pub token_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Feed-forward width inside transformer blocks; `2 * token_dim` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub adapter_activation: AdapterActivation,
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, encoder_mode: EncoderMode) -> Self {
        Self {
            architecture,
            encoder_mode,
            token_dim: default_token_dim(),
            heads: default_heads(),
            layers: default_layers(),
            hidden: default_hidden(),
            ffn_dim: None,
            dropout: 0.0,
            adapter_activation: default_activation(),
            pooling: default_pooling(),
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(2 * self.token_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.token_dim == 0 {
            return fail("token_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.architecture {
            Architecture::Mlp | Architecture::ResNet => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return fail(format!("hidden sizes {:?} must be non-empty and positive", self.hidden));
                }
            }
            Architecture::FtTransformer => {
                if self.layers == 0 {
                    return fail("an FT-Transformer needs at least one layer".into());
                }
                if self.heads == 0 || self.token_dim % self.heads != 0 {
                    return fail(format!(
                        "token_dim {} is not divisible by {} heads",
                        self.token_dim, self.heads
                    ));
                }
                if self.ffn_width() == 0 {
                    return fail("ffn_dim must be positive".into());
                }
            }
        }
        Ok(())
    }
}
