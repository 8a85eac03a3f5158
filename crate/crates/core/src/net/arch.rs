use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

use super::{Layer, Network};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { out: usize },
    Conv { out_channels: usize, kernel: usize },
    Pool,
}

/// Layer sequence, written as e.g. `conv:8x5,pool,dense:64,dense:10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture(pub Vec<LayerSpec>);

impl Architecture {
    /// Dense hidden layers followed by a dense output of width `classes`.
    pub fn mlp(hidden: &[usize], classes: usize) -> Self {
        let mut layers: Vec<_> = hidden.iter().map(|&out| LayerSpec::Dense { out }).collect();
        layers.push(LayerSpec::Dense { out: classes });
        Architecture(layers)
    }

    /// He-uniform weights, zero biases.
    pub(crate) fn build(&self, input_shape: Vec<usize>, rng: &mut impl Rng) -> Result<Network> {
        let mut layers = Vec::with_capacity(self.0.len());
        let mut shape = input_shape.clone();
        for spec in &self.0 {
            let layer = match *spec {
                LayerSpec::Dense { out } => {
                    let fan_in: usize = shape.iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Layer::Dense {
                        weights: Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..bound)),
                        biases: Array1::zeros(out),
                    }
                }
                LayerSpec::Conv { out_channels, kernel } => {
                    let in_ch = *shape.first().ok_or_else(|| Error::invalid("empty shape"))?;
                    let fan_in = in_ch * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Layer::Conv2d {
                        kernel: Array4::from_shape_fn((out_channels, in_ch, kernel, kernel), |_| {
                            rng.random_range(-bound..bound)
                        }),
                        biases: Array1::zeros(out_channels),
                    }
                }
                LayerSpec::Pool => Layer::MaxPool2,
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Network::new(input_shape, layers)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::invalid(format!("bad layer size '{t}' in '{s}'")))
        };
        let mut layers = Vec::new();
        for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let spec = match token.split_once(':') {
                None if token == "pool" => LayerSpec::Pool,
                Some(("dense", n)) => LayerSpec::Dense { out: parse_num(n)? },
                Some(("conv", ck)) => {
                    let (c, k) = ck
                        .split_once('x')
                        .ok_or_else(|| Error::invalid(format!("conv layer must be conv:<channels>x<kernel>, got '{token}'")))?;
                    LayerSpec::Conv {
                        out_channels: parse_num(c)?,
                        kernel: parse_num(k)?,
                    }
                }
                _ => return Err(Error::invalid(format!("unknown layer '{token}'"))),
            };
            layers.push(spec);
        }
        if layers.is_empty() {
            return Err(Error::invalid("empty architecture"));
        }
        Ok(Architecture(layers))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match l {
                LayerSpec::Dense { out } => write!(f, "dense:{out}")?,
                LayerSpec::Conv { out_channels, kernel } => write!(f, "conv:{out_channels}x{kernel}")?,
                LayerSpec::Pool => f.write_str("pool")?,
            }
        }
        Ok(())
    }
}
