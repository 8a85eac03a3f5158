//! Feed-forward ReLU networks.
//!
//! Every dense or conv layer except the last is followed by ReLU; the output
//! layer is affine. `MaxPool2` selects one input per 2×2 window, so the whole
//! network stays piecewise linear and each input's linear region is fixed by
//! its [`ActivationPattern`].

mod arch;
pub(crate) mod grad;
pub mod loss;
mod optim;
mod pattern;
mod serial;
pub(crate) mod trace;

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};

pub use arch::{Architecture, LayerSpec};
pub use grad::{grad_input, grad_params, input_gradients, Gradients, LossSpec, Objective};
pub use optim::Sgd;
pub use pattern::{ActivationPattern, PatternEntry};
pub use serial::{LayerDoc, ModelDoc, MODEL_FORMAT_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `weights` is `(out, in)`; the input is flattened row-major.
    Dense {
        weights: Array2<f64>,
        biases: Array1<f64>,
    },
    /// Valid (unpadded) stride-1 convolution, kernel `(out_ch, in_ch, k, k)`.
    Conv2d {
        kernel: Array4<f64>,
        biases: Array1<f64>,
    },
    /// Non-overlapping 2×2 max pooling; odd trailing rows/cols are dropped.
    MaxPool2,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2 => "maxpool2",
        }
    }

    fn has_params(&self) -> bool {
        !matches!(self, Layer::MaxPool2)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match self {
            Layer::Dense { weights, biases } => {
                let (out, inp) = weights.dim();
                if inp != numel {
                    return Err(Error::shape(
                        format!("dense input width {inp}"),
                        format!("{numel} from shape {input:?}"),
                    ));
                }
                if biases.len() != out {
                    return Err(Error::shape(format!("{out} biases"), biases.len()));
                }
                Ok(vec![out])
            }
            Layer::Conv2d { kernel, biases } => {
                let (out_ch, in_ch, kh, kw) = kernel.dim();
                let [c, h, w] = image_dims(input)?;
                if kh != kw || kh == 0 {
                    return Err(Error::invalid(format!("conv kernel must be square, got {kh}x{kw}")));
                }
                if c != in_ch || h < kh || w < kw {
                    return Err(Error::shape(
                        format!("{in_ch} channels with spatial size >= {kh}"),
                        format!("{input:?}"),
                    ));
                }
                if biases.len() != out_ch {
                    return Err(Error::shape(format!("{out_ch} biases"), biases.len()));
                }
                Ok(vec![out_ch, h - kh + 1, w - kw + 1])
            }
            Layer::MaxPool2 => {
                let [c, h, w] = image_dims(input)?;
                if h < 2 || w < 2 {
                    return Err(Error::shape("spatial size >= 2", format!("{input:?}")));
                }
                Ok(vec![c, h / 2, w / 2])
            }
        }
    }

    fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Dense { weights, biases } => {
                Some((weights.as_slice().expect("standard layout"), biases.as_slice().expect("standard layout")))
            }
            Layer::Conv2d { kernel, biases } => {
                Some((kernel.as_slice().expect("standard layout"), biases.as_slice().expect("standard layout")))
            }
            Layer::MaxPool2 => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Dense { weights, biases } => Some((
                weights.as_slice_mut().expect("standard layout"),
                biases.as_slice_mut().expect("standard layout"),
            )),
            Layer::Conv2d { kernel, biases } => Some((
                kernel.as_slice_mut().expect("standard layout"),
                biases.as_slice_mut().expect("standard layout"),
            )),
            Layer::MaxPool2 => None,
        }
    }
}

fn image_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::shape("(channels, height, width)", format!("{other:?}"))),
    }
}

/// A layered ReLU network `F: [0,1]^n -> R^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    // output shape of each layer
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::invalid(format!("bad input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if !matches!(layers.last(), Some(Layer::Dense { .. })) {
            return Err(Error::invalid("output layer must be dense"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for layer in &layers {
            current = layer.output_shape(&current)?;
            shapes.push(current.clone());
        }
        let num_classes = current[0];
        if num_classes == 0 {
            return Err(Error::invalid("output width must be positive"));
        }
        let net = Network {
            layers,
            input_shape,
            num_classes,
            shapes,
        };
        if !net.is_finite() {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(net)
    }

    /// Random He-uniform initialisation with zero biases.
    pub fn init(input_shape: Vec<usize>, arch: &Architecture, rng: &mut impl rand::Rng) -> Result<Self> {
        arch.build(input_shape, rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Output shape of layer `l`.
    pub fn layer_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    fn layer_input_shape(&self, l: usize) -> &[usize] {
        if l == 0 {
            &self.input_shape
        } else {
            &self.shapes[l - 1]
        }
    }

    /// Whether layer `l` is followed by ReLU.
    pub fn is_relu_layer(&self, l: usize) -> bool {
        self.layers[l].has_params() && l + 1 < self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameter tensors in canonical order: for each dense/conv layer, its
    /// weights (row-major) followed by its biases.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                format!("input of length {} (shape {:?})", self.input_dim(), self.input_shape),
                x.len(),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_batch(&self, xs: ArrayView2<f64>) -> Result<()> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("rows of length {} (shape {:?})", self.input_dim(), self.input_shape),
                xs.ncols(),
            ));
        }
        Ok(())
    }

    /// Logits `F(x)`.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        let out = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok(out.row(0).to_owned())
    }

    /// Logits for each row of `xs`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(xs)?;
        Ok(trace::forward(self, xs.to_owned(), None, false).output)
    }

    pub fn forward_with_pattern(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, ActivationPattern)> {
        self.check_input(x)?;
        let t = trace::forward(self, x.insert_axis(Axis(0)).to_owned(), None, false);
        let pattern = ActivationPattern::from_trace(self, &t, 0);
        Ok((t.output.row(0).to_owned(), pattern))
    }

    /// Activation patterns of every row of `xs`.
    pub fn patterns_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<ActivationPattern>> {
        self.check_batch(xs)?;
        let t = trace::forward(self, xs.to_owned(), None, false);
        Ok((0..xs.nrows()).map(|b| ActivationPattern::from_trace(self, &t, b)).collect())
    }

    /// Bias parts `B_x` of every row, by propagating only the bias vectors
    /// through the masked linear maps recorded at each row.
    pub fn bias_part_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(xs)?;
        let t = trace::forward(self, xs.to_owned(), None, false);
        let zeros = Array2::zeros(xs.raw_dim());
        Ok(trace::forward(self, zeros, Some(&t), false).output)
    }

    /// Logits and bias parts of every row, sharing one forward pass.
    pub fn logits_and_bias_batch(&self, xs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_batch(xs)?;
        let t = trace::forward(self, xs.to_owned(), None, false);
        let zeros = Array2::zeros(xs.raw_dim());
        let bias = trace::forward(self, zeros, Some(&t), false).output;
        Ok((t.output, bias))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::{array, Array};

    /// One hidden unit: `F(x) = 2·ReLU(x − 0.5) + 1`.
    pub(crate) fn one_unit_net() -> Network {
        Network::new(
            vec![1],
            vec![
                Layer::Dense {
                    weights: array![[1.0]],
                    biases: array![-0.5],
                },
                Layer::Dense {
                    weights: array![[2.0]],
                    biases: array![1.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn one_unit_forward_values() {
        let net = one_unit_net();
        assert_eq!(net.forward(array![1.0].view()).unwrap(), array![2.0]);
        assert_eq!(net.forward(array![0.2].view()).unwrap(), array![1.0]);
    }

    #[test]
    fn zero_weight_net_returns_output_biases() {
        let net = Network::new(
            vec![3],
            vec![
                Layer::Dense {
                    weights: Array2::zeros((4, 3)),
                    biases: Array1::zeros(4),
                },
                Layer::Dense {
                    weights: Array2::zeros((2, 4)),
                    biases: array![0.25, -1.5],
                },
            ],
        )
        .unwrap();
        for x in [array![0.0, 0.0, 0.0], array![0.3, 0.9, 1.0]] {
            assert_eq!(net.forward(x.view()).unwrap(), array![0.25, -1.5]);
        }
    }

    #[test]
    fn pattern_follows_preactivation_sign() {
        let net = one_unit_net();
        let (_, p1) = net.forward_with_pattern(array![1.0].view()).unwrap();
        let (_, p0) = net.forward_with_pattern(array![0.2].view()).unwrap();
        assert_eq!(p1.entries, vec![PatternEntry::Relu(vec![true])]);
        assert_eq!(p0.entries, vec![PatternEntry::Relu(vec![false])]);
        // boundary point goes to the inactive side
        let (_, pb) = net.forward_with_pattern(array![0.5].view()).unwrap();
        assert_eq!(pb.entries, vec![PatternEntry::Relu(vec![false])]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = one_unit_net();
        assert!(matches!(net.forward(array![1.0, 2.0].view()), Err(Error::ShapeMismatch { .. })));
        let bad = Network::new(
            vec![3],
            vec![Layer::Dense {
                weights: Array2::zeros((2, 4)),
                biases: Array1::zeros(2),
            }],
        );
        assert!(bad.is_err());
        let pool_last = Network::new(vec![1, 4, 4], vec![Layer::MaxPool2]);
        assert!(pool_last.is_err());
    }

    #[test]
    fn conv_pool_shapes_chain() {
        let net = Network::new(
            vec![1, 6, 6],
            vec![
                Layer::Conv2d {
                    kernel: Array::zeros((2, 1, 3, 3)),
                    biases: Array1::zeros(2),
                },
                Layer::MaxPool2,
                Layer::Dense {
                    weights: Array2::zeros((3, 8)),
                    biases: Array1::zeros(3),
                },
            ],
        )
        .unwrap();
        assert_eq!(net.layer_shape(0), &[2, 4, 4]);
        assert_eq!(net.layer_shape(1), &[2, 2, 2]);
        assert_eq!(net.num_classes(), 3);
        assert!(net.is_relu_layer(0));
        assert!(!net.is_relu_layer(1));
        assert!(!net.is_relu_layer(2));
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        // identity-like conv is not needed: pool directly on the input image
        let net = Network::new(
            vec![1, 2, 2],
            vec![
                Layer::MaxPool2,
                Layer::Dense {
                    weights: array![[1.0]],
                    biases: array![0.0],
                },
            ],
        )
        .unwrap();
        let (_, p) = net.forward_with_pattern(array![0.7, 0.7, 0.1, 0.7].view()).unwrap();
        assert_eq!(p.entries, vec![PatternEntry::Pool(vec![0])]);
        let (_, p) = net.forward_with_pattern(array![0.1, 0.2, 0.9, 0.9].view()).unwrap();
        assert_eq!(p.entries, vec![PatternEntry::Pool(vec![2])]);
    }
}
