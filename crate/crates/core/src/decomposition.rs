//! Exact affine decomposition `F(x) = W_x·x + B_x` of a ReLU network at a
//! point, the bias classifier `argmax B_x`, and the construction of a ReLU
//! network with a prescribed step-function bias part.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::net::loss::argmax;
use crate::net::{self, ActivationPattern, Layer, Network, Objective};

/// A model whose logits, input gradients and bias part can be queried; the
/// "gradient-based model" seen by an attacker plus the owner's bias part.
pub trait AffineModel: Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>>;

    fn logits_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// `(m × n)` matrix whose row `i` is `∇_x F_i(x)`.
    fn input_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>>;

    /// `∇_x L_CE(F(x), label)`.
    fn loss_gradient(&self, x: ArrayView1<f64>, label: usize) -> Result<Array1<f64>>;

    /// `B_x`, computed by propagating bias vectors through the masked linear
    /// maps of the region containing `x`.
    fn bias_part(&self, x: ArrayView1<f64>) -> Result<Array1<f64>>;

    fn bias_part_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn pattern(&self, x: ArrayView1<f64>) -> Result<ActivationPattern>;

    /// Label of the bias classifier; ties go to the lowest index.
    fn bias_label(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.bias_part(x)?.view()))
    }

    /// Label of the full classifier `argmax F(x)`.
    fn full_label(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.logits(x)?.view()))
    }
}

impl AffineModel for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.forward(x)
    }

    fn logits_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_batch(xs)
    }

    fn input_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        net::grad::jacobian(self, x)
    }

    fn loss_gradient(&self, x: ArrayView1<f64>, label: usize) -> Result<Array1<f64>> {
        net::grad_input(self, x, Objective::Loss { label })
    }

    fn bias_part(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.bias_part_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    fn bias_part_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Network::bias_part_batch(self, xs)
    }

    fn pattern(&self, x: ArrayView1<f64>) -> Result<ActivationPattern> {
        Ok(self.forward_with_pattern(x)?.1)
    }
}

/// The affine map a network computes on the linear region of `at_point`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineDecomposition {
    pub w_x: Array2<f64>,
    pub b_x: Array1<f64>,
    pub pattern: ActivationPattern,
    pub at_point: Array1<f64>,
}

impl AffineDecomposition {
    /// `W_x·x + B_x`.
    pub fn evaluate(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w_x.dot(&x) + &self.b_x
    }

    /// First-degree part `W_x·x` at the anchor.
    pub fn first_degree(&self) -> Array1<f64> {
        self.w_x.dot(&self.at_point)
    }
}

/// Input Jacobian of the model at `x`; equals the region's linear map `W_x`.
pub fn input_jacobian<M: AffineModel + ?Sized>(model: &M, x: ArrayView1<f64>) -> Result<Array2<f64>> {
    model.input_jacobian(x)
}

/// Bias part by subtraction, `B_x = F(x) − W_x·x`, using only logits and
/// input gradients.
pub fn bias_part<M: AffineModel + ?Sized>(model: &M, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let logits = model.logits(x)?;
    let w = model.input_jacobian(x)?;
    Ok(logits - w.dot(&x))
}

/// Bias part by mask propagation (the network owner's route).
pub fn bias_part_by_masks<M: AffineModel + ?Sized>(model: &M, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    model.bias_part(x)
}

/// First-degree part `W_x·x` by propagating `x` through the masked linear maps
/// with every bias zeroed.
pub fn first_degree_by_masks(net: &Network, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    net.check_input(x)?;
    let xs = x.insert_axis(Axis(0)).to_owned();
    let t = net::trace::forward(net, xs.clone(), None, false);
    Ok(net::trace::forward(net, xs, Some(&t), true).output.row(0).to_owned())
}

pub fn bias_label<M: AffineModel + ?Sized>(model: &M, x: ArrayView1<f64>) -> Result<usize> {
    model.bias_label(x)
}

/// Bias-classifier labels of every row.
pub fn bias_labels<M: AffineModel + ?Sized>(model: &M, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(model.bias_part_batch(xs)?.rows().into_iter().map(argmax).collect())
}

/// Canonical bytes identifying the linear region of `x`.
pub fn region_signature<M: AffineModel + ?Sized>(model: &M, x: ArrayView1<f64>) -> Result<Vec<u8>> {
    Ok(model.pattern(x)?.to_bytes())
}

pub fn decompose(net: &Network, x: ArrayView1<f64>) -> Result<AffineDecomposition> {
    let w_x = net.input_jacobian(x)?;
    let b_x = bias_part(net, x)?;
    Ok(AffineDecomposition {
        w_x,
        b_x,
        pattern: net.forward_with_pattern(x)?.1,
        at_point: x.to_owned(),
    })
}

/// Builds the one-hidden-layer ReLU network
/// `F(x) = U·diag(sign b)·ReLU(diag(1/|b|)·W·x + sign b) + c`.
///
/// Hidden unit `i` is active exactly when `W_i·x + b_i > 0`, and then
/// contributes `sign(b_i)²·U_{:,i} = U_{:,i}` to the bias part, so
/// `B_F(x) = U·Γ(W·x + b) + c` with `Γ` the unit step (`Γ(0) = 0`).
pub fn construct_bias_network(
    u: ArrayView2<f64>,
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    c: ArrayView1<f64>,
) -> Result<Network> {
    let (m, hidden) = u.dim();
    let (hidden_w, n) = w.dim();
    if hidden_w != hidden || b.len() != hidden {
        return Err(Error::shape(
            format!("W with {hidden} rows and b of length {hidden}"),
            format!("W {:?}, b {}", w.dim(), b.len()),
        ));
    }
    if c.len() != m {
        return Err(Error::shape(format!("c of length {m}"), c.len()));
    }
    if let Some(i) = b.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::invalid(format!("b[{i}] = {} must be nonzero and finite", b[i])));
    }
    let mut hidden_w = w.to_owned();
    for (mut row, &bi) in hidden_w.rows_mut().into_iter().zip(b.iter()) {
        row /= bi.abs();
    }
    let signs = b.mapv(f64::signum);
    let mut out_w = u.to_owned();
    for (mut col, &s) in out_w.columns_mut().into_iter().zip(signs.iter()) {
        col *= s;
    }
    Network::new(
        vec![n],
        vec![
            Layer::Dense {
                weights: hidden_w,
                biases: signs,
            },
            Layer::Dense {
                weights: out_w,
                biases: c.to_owned(),
            },
        ],
    )
}
