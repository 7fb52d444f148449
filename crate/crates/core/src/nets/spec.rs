use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Fully connected ReLU network; an empty `hidden` list is a single
    /// linear layer.
    Mlp { hidden: Vec<usize> },
    /// Conv(k, same) + ReLU + 2x2 average pool per entry of `channels`
    /// (pooling only while both spatial extents are even), then a linear
    /// read-out.
    TinyCnn { channels: Vec<usize>, kernel: usize },
}

/// Architecture, input geometry, class count and initialization seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn mlp(hidden: &[usize], input_shape: (usize, usize, usize), classes: usize, seed: u64) -> Self {
        Self {
            arch: Arch::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape,
            classes,
            seed,
        }
    }

    pub fn tiny_cnn(
        channels: &[usize],
        kernel: usize,
        input_shape: (usize, usize, usize),
        classes: usize,
        seed: u64,
    ) -> Self {
        Self {
            arch: Arch::TinyCnn {
                channels: channels.to_vec(),
                kernel,
            },
            input_shape,
            classes,
            seed,
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    pub fn input_dims(&self) -> [usize; 3] {
        let (c, h, w) = self.input_shape;
        [c, h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return contract(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_len() == 0 {
            return contract(format!("empty input shape {:?}", self.input_shape));
        }
        match &self.arch {
            Arch::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return contract("mlp hidden widths must be positive");
                }
            }
            Arch::TinyCnn { channels, kernel } => {
                if channels.contains(&0) {
                    return contract("cnn channel counts must be positive");
                }
                if kernel % 2 == 0 {
                    return contract(format!("cnn kernel must be odd, got {kernel}"));
                }
                let (_, h, w) = self.input_shape;
                if *kernel > h || *kernel > w {
                    return contract(format!("cnn kernel {kernel} larger than input {h}x{w}"));
                }
            }
        }
        Ok(())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Compact architecture string: `mlp:64,32`, `mlp:` (linear) or
/// `tinycnn:8,16:k3`.
impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Mlp { hidden } => write!(f, "mlp:{}", join(hidden)),
            Arch::TinyCnn { channels, kernel } => write!(f, "tinycnn:{}:k{kernel}", join(channels)),
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer width `{p}`")))
        })
        .collect()
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        match parts.next().map(str::trim) {
            Some("mlp") => Ok(Arch::Mlp {
                hidden: parse_list(parts.next().unwrap_or(""))?,
            }),
            Some("tinycnn") => {
                let channels = parse_list(parts.next().unwrap_or(""))?;
                let kernel = match parts.next().map(str::trim) {
                    None => 3,
                    Some(k) => k
                        .trim_start_matches('k')
                        .parse()
                        .map_err(|_| Error::Config(format!("bad kernel size `{k}`")))?,
                };
                Ok(Arch::TinyCnn { channels, kernel })
            }
            other => contract(format!("unknown architecture `{}`", other.unwrap_or(""))),
        }
    }
}
