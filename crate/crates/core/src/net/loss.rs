//! Softmax cross-entropy.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

fn check_label(label: usize, m: usize) -> Result<()> {
    if label >= m {
        return Err(Error::invalid(format!("label {label} out of range for {m} classes")));
    }
    Ok(())
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(-log_softmax(logits)[label])
}

/// Per-row losses and the gradient of each row's loss with respect to its
/// logits (`softmax − onehot`).
pub fn cross_entropy_batch(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(Array1<f64>, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::shape(format!("{} labels", logits.nrows()), labels.len()));
    }
    let m = logits.ncols();
    for &y in labels {
        check_label(y, m)?;
    }
    let mut losses = Array1::zeros(labels.len());
    let mut grad = Array2::zeros(logits.raw_dim());
    Zip::from(logits.axis_iter(Axis(0)))
        .and(grad.axis_iter_mut(Axis(0)))
        .and(&mut losses)
        .and(labels)
        .for_each(|row, mut g, loss, &y| {
            let lsm = log_softmax(row);
            *loss = -lsm[y];
            g.assign(&lsm.mapv(f64::exp));
            g[y] -= 1.0;
        });
    Ok((losses, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let l = cross_entropy(array![0.0, 0.0].view(), 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits() {
        let e10 = 10f64.exp();
        let l0 = cross_entropy(array![10.0, 0.0].view(), 0).unwrap();
        let l1 = cross_entropy(array![10.0, 0.0].view(), 1).unwrap();
        assert!((l0 - (-(e10 / (e10 + 1.0)).ln())).abs() < 1e-15);
        assert!((l0 - 4.54e-5).abs() < 1e-7);
        assert!((l1 - (e10 + 1.0).ln()).abs() < 1e-12);
        assert!((l1 - 10.0000454).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        assert!(cross_entropy(array![0.0, 0.0].view(), 2).is_err());
        assert!(cross_entropy_batch(array![[0.0, 0.0]].view(), &[5]).is_err());
    }

    #[test]
    fn batch_gradient_is_softmax_minus_onehot() {
        let (losses, g) = cross_entropy_batch(array![[0.0, 0.0], [10.0, 0.0]].view(), &[1, 0]).unwrap();
        assert!((losses[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[[0, 0]] - 0.5).abs() < 1e-15 && (g[[0, 1]] + 0.5).abs() < 1e-15);
        assert!(g.row(1).sum().abs() < 1e-15);
    }

    #[test]
    fn argmax_tie_rule() {
        assert_eq!(argmax(array![0.1, 0.9].view()), 1);
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
    }
}
