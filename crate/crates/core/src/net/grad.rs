use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::loss::cross_entropy_batch;
use super::trace::{self, LayerGrad};
use super::Network;
use crate::error::{Error, Result};

/// Scalar whose input gradient is requested.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Logit `F_i(x)`.
    Logit(usize),
    /// `L_CE(F(x), label)`.
    Loss { label: usize },
}

/// Training loss for parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossSpec {
    /// `L_CE(F(x), y)`.
    Full,
    /// `L_CE(B_F(x), y)` with the activation masks of `x` held fixed.
    Bias,
    /// `L_CE(B_F(x), y) + gamma·L_CE(F(x), y)`.
    Combined { gamma: f64 },
}

/// Parameter gradients in the network's canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            tensors: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn from_layers(layers: Vec<LayerGrad>) -> Self {
        Gradients {
            tensors: layers.into_iter().flat_map(|g| [g.weights, g.biases]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.tensors.iter_mut().flatten() {
            *v *= factor;
        }
    }

    /// `self += factor·other`.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient of the chosen scalar with respect to the input.
pub fn grad_input(net: &Network, x: ArrayView1<f64>, objective: Objective) -> Result<Array1<f64>> {
    net.check_input(x)?;
    let m = net.num_classes();
    let t = trace::forward(net, x.insert_axis(Axis(0)).to_owned(), None, false);
    let mut dout = Array2::zeros((1, m));
    match objective {
        Objective::Logit(i) => {
            if i >= m {
                return Err(Error::invalid(format!("logit {i} out of range for {m} classes")));
            }
            dout[[0, i]] = 1.0;
        }
        Objective::Loss { label } => {
            let (_, g) = cross_entropy_batch(t.output.view(), &[label])?;
            dout = g;
        }
    }
    let (din, _) = trace::backward(net, &t, dout, false);
    Ok(din.row(0).to_owned())
}

/// Input gradient of `L_CE(F(x) + offset, label)` through `F` only, and the
/// logit cotangent `softmax(F(x) + offset) − e_label`.
pub(crate) fn loss_gradient_with_offset(
    net: &Network,
    x: ArrayView1<f64>,
    offset: ArrayView1<f64>,
    label: usize,
) -> Result<(Array1<f64>, Array1<f64>)> {
    net.check_input(x)?;
    if offset.len() != net.num_classes() {
        return Err(Error::shape(net.num_classes(), offset.len()));
    }
    let t = trace::forward(net, x.insert_axis(Axis(0)).to_owned(), None, false);
    let logits = &t.output + &offset.insert_axis(Axis(0));
    let (_, g) = cross_entropy_batch(logits.view(), &[label])?;
    let (din, _) = trace::backward(net, &t, g.clone(), false);
    Ok((din.row(0).to_owned(), g.row(0).to_owned()))
}

/// Per-row input gradients of `L_CE(F(x_r), y_r)`, together with the logits.
pub fn input_gradients(net: &Network, xs: ArrayView2<f64>, labels: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
    net.check_batch(xs)?;
    let t = trace::forward(net, xs.to_owned(), None, false);
    let (_, g) = cross_entropy_batch(t.output.view(), labels)?;
    let (din, _) = trace::backward(net, &t, g, false);
    Ok((din, t.output))
}

/// Input Jacobian `(m × n)`: row `i` is the gradient of logit `i`.
pub(crate) fn jacobian(net: &Network, x: ArrayView1<f64>) -> Result<Array2<f64>> {
    net.check_input(x)?;
    let m = net.num_classes();
    let xs = x.insert_axis(Axis(0)).broadcast((m, x.len())).expect("broadcast row").to_owned();
    let t = trace::forward(net, xs, None, false);
    let (din, _) = trace::backward(net, &t, Array2::eye(m), false);
    Ok(din)
}

/// Mean loss over the batch and its parameter gradient.
pub fn grad_params(net: &Network, xs: ArrayView2<f64>, labels: &[usize], loss: LossSpec) -> Result<(f64, Gradients)> {
    net.check_batch(xs)?;
    let batch = xs.nrows();
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::shape(format!("{batch} labels"), labels.len()));
    }
    let inv = 1.0 / batch as f64;
    let full = trace::forward(net, xs.to_owned(), None, false);
    let mut total_loss = 0.0;
    let mut grads: Option<Gradients> = None;

    let full_weight = match loss {
        LossSpec::Full => Some(1.0),
        LossSpec::Bias => None,
        LossSpec::Combined { gamma } => Some(gamma),
    };
    if let Some(weight) = full_weight {
        let (losses, mut dout) = cross_entropy_batch(full.output.view(), labels)?;
        total_loss += weight * losses.sum() * inv;
        dout *= weight * inv;
        let (_, g) = trace::backward(net, &full, dout, true);
        grads = Some(Gradients::from_layers(g.expect("requested")));
    }
    if matches!(loss, LossSpec::Bias | LossSpec::Combined { .. }) {
        // B_x is the frozen-mask network evaluated at the zero input.
        let frozen = trace::forward(net, Array2::zeros(xs.raw_dim()), Some(&full), false);
        let (losses, mut dout) = cross_entropy_batch(frozen.output.view(), labels)?;
        total_loss += losses.sum() * inv;
        dout *= inv;
        let (_, g) = trace::backward(net, &frozen, dout, true);
        let g = Gradients::from_layers(g.expect("requested"));
        match grads.as_mut() {
            Some(acc) => acc.add_scaled(&g, 1.0),
            None => grads = Some(g),
        }
    }
    Ok((total_loss, grads.expect("at least one loss term")))
}
