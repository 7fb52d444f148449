use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::tensor::{gaussian_kernel, smooth};
use crate::Tensor;

/// Deterministic input transform applied before every victim forward pass.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum DefenseSpec {
    #[default]
    None,
    /// Snap each pixel to one of `levels` evenly spaced values.
    Quantize { levels: u32 },
    /// Gaussian blur, channel-wise, zero padding.
    Blur { size: usize, sigma: f64 },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Quantize { levels } if levels < 2 => {
                contract(format!("quantization needs at least 2 levels, got {levels}"))
            }
            DefenseSpec::Quantize { .. } => Ok(()),
            DefenseSpec::Blur { size, sigma } => gaussian_kernel(size, sigma).map(|_| ()),
        }
    }
}

/// `none`, `quantize:16`, `blur:3:1.0`
impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseSpec::None => write!(f, "none"),
            DefenseSpec::Quantize { levels } => write!(f, "quantize:{levels}"),
            DefenseSpec::Blur { size, sigma } => write!(f, "blur:{size}:{sigma}"),
        }
    }
}

impl FromStr for DefenseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad defense `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let spec = match parts[..] {
            ["none"] | [""] => DefenseSpec::None,
            ["quantize", l] => DefenseSpec::Quantize {
                levels: l.parse().map_err(|_| bad())?,
            },
            ["blur", k, s] => DefenseSpec::Blur {
                size: k.parse().map_err(|_| bad())?,
                sigma: s.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A validated defense ready to apply.
#[derive(Clone, Debug)]
pub(crate) enum Defense {
    None,
    Quantize(f64),
    Blur(Tensor),
}

impl Defense {
    pub(crate) fn compile(spec: &DefenseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            DefenseSpec::None => Defense::None,
            DefenseSpec::Quantize { levels } => Defense::Quantize(f64::from(levels - 1)),
            DefenseSpec::Blur { size, sigma } => Defense::Blur(gaussian_kernel(size, sigma)?),
        })
    }

    /// Transform one `[C, H, W]` image.
    pub(crate) fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Defense::None => Ok(x.clone()),
            Defense::Quantize(steps) => Ok(x.map(|v| (v.clamp(0.0, 1.0) * steps).round() / steps)),
            Defense::Blur(k) => smooth(x, k),
        }
    }
}
