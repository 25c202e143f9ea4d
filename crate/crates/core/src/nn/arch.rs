use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a fully connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub use_batchnorm: bool,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            num_classes,
            activation: Activation::Relu,
            use_batchnorm: false,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.use_batchnorm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input_dim must be >= 1".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArchitecture(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArchitecture("hidden widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArchitecture("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden_widths.len()
    }

    /// Number of affine layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(fan_out, fan_in)` of affine layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 {
            self.input_dim
        } else {
            self.hidden_widths[l - 1]
        };
        let fan_out = if l < self.hidden_widths.len() {
            self.hidden_widths[l]
        } else {
            self.num_classes
        };
        (fan_out, fan_in)
    }

    /// Count of trainable scalars.
    pub fn total_dim(&self) -> usize {
        let affine: usize = (0..self.num_layers())
            .map(|l| {
                let (o, i) = self.layer_shape(l);
                o * i + o
            })
            .sum();
        let norm: usize = if self.use_batchnorm {
            self.hidden_widths.iter().map(|w| 2 * w).sum()
        } else {
            0
        };
        affine + norm
    }

    /// Errors unless the two architectures are interchangeable for parameter arithmetic.
    pub fn ensure_compatible(&self, other: &Self) -> Result<()> {
        if self != other {
            return Err(Error::ArchMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}
