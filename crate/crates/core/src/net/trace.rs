//! Batched forward pass with recorded activations, and the matching reverse
//! pass.
//!
//! A forward pass may be *frozen* to the trace of another pass: ReLU masks and
//! pool selections are then copied from that trace instead of being decided by
//! the current values. Freezing to the trace of `x` and feeding zeros yields
//! the bias part `B_x`; feeding `x` with zeroed biases would yield `W_x·x`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::{Layer, Network};

pub(crate) struct LayerTrace {
    /// Dense: layer input. Conv: im2col matrix `(batch·P, in_ch·k·k)`.
    pub(crate) saved: Array2<f64>,
    /// ReLU mask on the pre-activation, `(batch, out_features)`.
    pub(crate) mask: Option<Array2<bool>>,
    /// Selected flat input index per pooled output, `(batch, out_features)`.
    pub(crate) argmax: Option<Array2<u32>>,
}

pub(crate) struct Trace {
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) output: Array2<f64>,
}

/// Runs the network on every row of `input`.
///
/// With `frozen`, masks and pool selections come from that trace (which must
/// have the same batch size). With `skip_biases`, every bias vector is treated
/// as zero.
pub(crate) fn forward(net: &Network, input: Array2<f64>, frozen: Option<&Trace>, skip_biases: bool) -> Trace {
    let batch = input.nrows();
    let mut act = input;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let in_shape = net.layer_input_shape(l);
        let frozen_layer = frozen.map(|t| &t.layers[l]);
        match layer {
            Layer::Dense { weights, biases } => {
                let mut z = act.dot(&weights.t());
                if !skip_biases {
                    z += biases;
                }
                let mask = relu_in_place(net, l, &mut z, frozen_layer);
                layers.push(LayerTrace {
                    saved: act,
                    mask,
                    argmax: None,
                });
                act = z;
            }
            Layer::Conv2d { kernel, biases } => {
                let (out_ch, in_ch, k, _) = kernel.dim();
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (h - k + 1, w - k + 1);
                let cols = im2col(act.view(), in_ch, h, w, k);
                let kmat = kernel
                    .view()
                    .into_shape_with_order((out_ch, in_ch * k * k))
                    .expect("contiguous kernel");
                let zmat = cols.dot(&kmat.t()); // (batch·P, out_ch)
                let positions = oh * ow;
                let mut z = Array2::zeros((batch, out_ch * positions));
                for b in 0..batch {
                    let block = zmat.slice(s![b * positions..(b + 1) * positions, ..]);
                    let mut row = z.row_mut(b);
                    for o in 0..out_ch {
                        let bias = if skip_biases { 0.0 } else { biases[o] };
                        for p in 0..positions {
                            row[o * positions + p] = block[[p, o]] + bias;
                        }
                    }
                }
                let mask = relu_in_place(net, l, &mut z, frozen_layer);
                layers.push(LayerTrace {
                    saved: cols,
                    mask,
                    argmax: None,
                });
                act = z;
            }
            Layer::MaxPool2 => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ph, pw) = (h / 2, w / 2);
                let out_features = c * ph * pw;
                let argmax = match frozen_layer {
                    Some(t) => t.argmax.clone().expect("frozen trace from the same network"),
                    None => {
                        let mut idx = Array2::<u32>::zeros((batch, out_features));
                        for b in 0..batch {
                            let row = act.row(b);
                            for ch in 0..c {
                                for i in 0..ph {
                                    for j in 0..pw {
                                        let mut best = ch * h * w + 2 * i * w + 2 * j;
                                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                            let cand = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                                            // strict: ties keep the lowest flat index
                                            if row[cand] > row[best] {
                                                best = cand;
                                            }
                                        }
                                        idx[[b, ch * ph * pw + i * pw + j]] = best as u32;
                                    }
                                }
                            }
                        }
                        idx
                    }
                };
                let mut out = Array2::zeros((batch, out_features));
                Zip::from(out.rows_mut())
                    .and(act.rows())
                    .and(argmax.rows())
                    .for_each(|mut o, a, sel| {
                        for (dst, &src) in o.iter_mut().zip(sel.iter()) {
                            *dst = a[src as usize];
                        }
                    });
                layers.push(LayerTrace {
                    saved: Array2::zeros((0, 0)),
                    mask: None,
                    argmax: Some(argmax),
                });
                act = out;
            }
        }
    }
    Trace { layers, output: act }
}

fn relu_in_place(net: &Network, l: usize, z: &mut Array2<f64>, frozen: Option<&LayerTrace>) -> Option<Array2<bool>> {
    if !net.is_relu_layer(l) {
        return None;
    }
    let mask = match frozen {
        Some(t) => t.mask.clone().expect("frozen trace from the same network"),
        None => z.mapv(|v| v > 0.0),
    };
    Zip::from(&mut *z).and(&mask).for_each(|v, &on| {
        if !on {
            *v = 0.0;
        }
    });
    Some(mask)
}

fn im2col(act: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let batch = act.nrows();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut cols = Array2::zeros((batch * oh * ow, c * k * k));
    for b in 0..batch {
        let img = act.row(b);
        for i in 0..oh {
            for j in 0..ow {
                let mut col = cols.row_mut(b * oh * ow + i * ow + j);
                let mut q = 0;
                for ch in 0..c {
                    for di in 0..k {
                        let base = ch * h * w + (i + di) * w + j;
                        for dj in 0..k {
                            col[q] = img[base + dj];
                            q += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: ArrayView2<f64>, batch: usize, c: usize, h: usize, w: usize, k: usize) -> Array2<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Array2::zeros((batch, c * h * w));
    for b in 0..batch {
        let mut img = out.row_mut(b);
        for i in 0..oh {
            for j in 0..ow {
                let col = dcols.row(b * oh * ow + i * ow + j);
                let mut q = 0;
                for ch in 0..c {
                    for di in 0..k {
                        let base = ch * h * w + (i + di) * w + j;
                        for dj in 0..k {
                            img[base + dj] += col[q];
                            q += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Parameter gradients of one dense/conv layer, flattened row-major.
pub(crate) struct LayerGrad {
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
}

/// Reverse pass. `dout` is the cotangent of the output rows. Returns the
/// cotangent of the input rows and, when requested, the parameter gradients
/// (summed over rows) in canonical parameter order.
pub(crate) fn backward(
    net: &Network,
    trace: &Trace,
    dout: Array2<f64>,
    want_params: bool,
) -> (Array2<f64>, Option<Vec<LayerGrad>>) {
    let batch = dout.nrows();
    let mut delta = dout;
    let mut grads: Vec<LayerGrad> = Vec::new();
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let t = &trace.layers[l];
        if let Some(mask) = &t.mask {
            Zip::from(&mut delta).and(mask).for_each(|d, &on| {
                if !on {
                    *d = 0.0;
                }
            });
        }
        let in_shape = net.layer_input_shape(l);
        match layer {
            Layer::Dense { weights, .. } => {
                if want_params {
                    let dw = delta.t().dot(&t.saved);
                    let db = delta.sum_axis(Axis(0));
                    grads.push(LayerGrad {
                        weights: flatten(dw),
                        biases: db.to_vec(),
                    });
                }
                delta = delta.dot(weights);
            }
            Layer::Conv2d { kernel, .. } => {
                let (out_ch, in_ch, k, _) = kernel.dim();
                let (h, w) = (in_shape[1], in_shape[2]);
                let positions = (h - k + 1) * (w - k + 1);
                let mut dmat = Array2::zeros((batch * positions, out_ch));
                for b in 0..batch {
                    let row = delta.row(b);
                    for o in 0..out_ch {
                        for p in 0..positions {
                            dmat[[b * positions + p, o]] = row[o * positions + p];
                        }
                    }
                }
                let kmat = kernel
                    .view()
                    .into_shape_with_order((out_ch, in_ch * k * k))
                    .expect("contiguous kernel");
                if want_params {
                    let dk = dmat.t().dot(&t.saved);
                    let db = dmat.sum_axis(Axis(0));
                    grads.push(LayerGrad {
                        weights: flatten(dk),
                        biases: db.to_vec(),
                    });
                }
                let dcols = dmat.dot(&kmat);
                delta = col2im(dcols.view(), batch, in_ch, h, w, k);
            }
            Layer::MaxPool2 => {
                let argmax = t.argmax.as_ref().expect("pool trace");
                let in_features: usize = in_shape.iter().product();
                let mut din = Array2::zeros((batch, in_features));
                Zip::from(din.rows_mut())
                    .and(delta.rows())
                    .and(argmax.rows())
                    .for_each(|mut d, g, sel| {
                        for (&gv, &src) in g.iter().zip(sel.iter()) {
                            d[src as usize] += gv;
                        }
                    });
                delta = din;
            }
        }
    }
    grads.reverse();
    (delta, want_params.then_some(grads))
}

fn flatten(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}
