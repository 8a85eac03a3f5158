//! JSON model schema.
//!
//! ```json
//! {"format_version": 1, "input_shape": [784], "num_classes": 10,
//!  "layers": [{"kind": "dense", "shape": [10, 784], "weights": [...], "biases": [...]}]}
//! ```
//!
//! Weights are flattened row-major. Floats are written in shortest
//! round-trip form and parsed with correct rounding, so a saved model loads
//! bit-identically.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{Layer, Network};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerDoc {
    pub kind: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biases: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelDoc {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerDoc>,
    /// Free-form run description; ignored when loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<BTreeMap<String, String>>,
}

impl Network {
    pub fn to_doc(&self) -> ModelDoc {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { weights, biases } => LayerDoc {
                    kind: "dense".into(),
                    shape: weights.shape().to_vec(),
                    weights: Some(weights.iter().copied().collect()),
                    biases: Some(biases.to_vec()),
                },
                Layer::Conv2d { kernel, biases } => LayerDoc {
                    kind: "conv2d".into(),
                    shape: kernel.shape().to_vec(),
                    weights: Some(kernel.iter().copied().collect()),
                    biases: Some(biases.to_vec()),
                },
                Layer::MaxPool2 => LayerDoc {
                    kind: "maxpool2".into(),
                    shape: vec![],
                    weights: None,
                    biases: None,
                },
            })
            .collect();
        ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            layers,
            provenance: None,
        }
    }

    pub fn from_doc(doc: ModelDoc) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            let need = |v: Option<Vec<f64>>, what: &str| {
                v.ok_or_else(|| Error::invalid(format!("layer {i} ({}) is missing {what}", l.kind)))
            };
            let bad_shape = |e: ndarray::ShapeError| Error::invalid(format!("layer {i}: {e}"));
            let layer = match l.kind.as_str() {
                "dense" => {
                    let &[out, inp] = l.shape.as_slice() else {
                        return Err(Error::invalid(format!("layer {i}: dense shape must have 2 dims")));
                    };
                    Layer::Dense {
                        weights: Array2::from_shape_vec((out, inp), need(l.weights.clone(), "weights")?).map_err(bad_shape)?,
                        biases: Array1::from_vec(need(l.biases.clone(), "biases")?),
                    }
                }
                "conv2d" => {
                    let &[o, c, kh, kw] = l.shape.as_slice() else {
                        return Err(Error::invalid(format!("layer {i}: conv2d shape must have 4 dims")));
                    };
                    Layer::Conv2d {
                        kernel: Array4::from_shape_vec((o, c, kh, kw), need(l.weights.clone(), "weights")?).map_err(bad_shape)?,
                        biases: Array1::from_vec(need(l.biases.clone(), "biases")?),
                    }
                }
                "maxpool2" => Layer::MaxPool2,
                other => return Err(Error::invalid(format!("layer {i}: unknown kind '{other}'"))),
            };
            layers.push(layer);
        }
        let net = Network::new(doc.input_shape, layers)?;
        if net.num_classes != doc.num_classes {
            return Err(Error::invalid(format!(
                "num_classes {} disagrees with output layer width {}",
                doc.num_classes, net.num_classes
            )));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("finite floats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Network::from_doc(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..1000, scale in 1e-8f64..1e8) {
            let arch: Architecture = "conv:2x3,pool,dense:3".parse().unwrap();
            let mut rng = crate::rng::stream(seed, 0);
            let mut net = Network::init(vec![1, 6, 6], &arch, &mut rng).unwrap();
            for p in net.params_mut() {
                for v in p.iter_mut() {
                    *v *= scale / 3.0;
                }
            }
            let back = Network::from_json(&net.to_json()).unwrap();
            prop_assert_eq!(back, net);
        }
    }

    #[test]
    fn rejects_version_and_corruption() {
        let arch = Architecture::mlp(&[3], 2);
        let net = Network::init(vec![2], &arch, &mut crate::rng::stream(0, 0)).unwrap();
        let mut doc = net.to_doc();
        doc.format_version = 99;
        assert!(Network::from_doc(doc).is_err());
        let mut doc = net.to_doc();
        doc.layers[0].weights.as_mut().unwrap().pop();
        assert!(Network::from_doc(doc).is_err());
        let mut doc = net.to_doc();
        doc.num_classes = 3;
        assert!(Network::from_doc(doc).is_err());
        assert!(Network::from_json("{\"format_version\": 1").is_err());
    }

    #[test]
    fn maxpool_has_no_parameters_in_json() {
        let arch: Architecture = "conv:1x2,pool,dense:2".parse().unwrap();
        let net = Network::init(vec![1, 4, 4], &arch, &mut crate::rng::stream(0, 0)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&net.to_json()).unwrap();
        let pool = &v["layers"][1];
        assert_eq!(pool["kind"], "maxpool2");
        assert!(pool.get("biases").is_none());
    }
}
