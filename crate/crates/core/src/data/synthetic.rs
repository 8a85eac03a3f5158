//! Reproducible synthetic datasets inside `[0,1]^n`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::LabeledDataset;
use crate::decomposition::construct_bias_network;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Balls of radius 0.1 around well-separated centres.
    Blobs,
    /// Two interleaved half circles (2 classes) in the first two coordinates.
    Moons,
    /// Class `k` occupies the `k`-th of `m` slabs along coordinate 0.
    Steps,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "moons" => Ok(SyntheticKind::Moons),
            "steps" => Ok(SyntheticKind::Steps),
            other => Err(Error::invalid(format!("unknown synthetic kind '{other}' (blobs|moons|steps)"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Moons => "moons",
            SyntheticKind::Steps => "steps",
        })
    }
}

const BLOB_RADIUS: f64 = 0.1;
const BLOB_MIN_CENTER_DISTANCE: f64 = 0.35;

/// `count` samples with labels cycling through `0..m`.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, m: usize, count: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || m < 2 {
        return Err(Error::invalid(format!("need n >= 1 and m >= 2, got n={n}, m={m}")));
    }
    if count < m {
        return Err(Error::invalid(format!("count {count} is smaller than the class count {m}")));
    }
    let mut r = rng::stream(seed, 0);
    let labels: Vec<usize> = (0..count).map(|i| i % m).collect();
    let mut inputs = Array2::zeros((count, n));
    match kind {
        SyntheticKind::Blobs => {
            let centers = blob_centers(n, m, &mut r)?;
            for (mut row, &y) in inputs.rows_mut().into_iter().zip(&labels) {
                let dir: Array1<f64> = Array1::from_shape_fn(n, |_| r.sample(StandardNormal));
                let norm = dir.dot(&dir).sqrt().max(f64::MIN_POSITIVE);
                let radius = BLOB_RADIUS * r.random::<f64>().powf(1.0 / n as f64);
                row.assign(&(&centers.row(y) + &(dir * (radius / norm))));
            }
        }
        SyntheticKind::Moons => {
            if m != 2 || n < 2 {
                return Err(Error::invalid("moons needs m = 2 and n >= 2"));
            }
            for (mut row, &y) in inputs.rows_mut().into_iter().zip(&labels) {
                let t = r.random_range(0.0..std::f64::consts::PI);
                let (px, py) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                let mut noise = || (r.sample::<f64, _>(StandardNormal) * 0.05).clamp(-0.1, 0.1);
                row[0] = (px + noise() + 1.2) / 3.4;
                row[1] = (py + noise() + 0.7) / 1.9;
                for j in 2..n {
                    row[j] = r.random_range(0.4..0.6);
                }
            }
        }
        SyntheticKind::Steps => {
            let width = 1.0 / m as f64;
            let gap = 0.1 * width;
            for (mut row, &y) in inputs.rows_mut().into_iter().zip(&labels) {
                row[0] = r.random_range(y as f64 * width + gap..(y + 1) as f64 * width - gap);
                for j in 1..n {
                    row[j] = r.random_range(0.0..1.0);
                }
            }
        }
    }
    LabeledDataset::new(format!("{kind}-n{n}-m{m}-c{count}-s{seed}"), inputs, labels, m)
}

fn blob_centers(n: usize, m: usize, r: &mut impl Rng) -> Result<Array2<f64>> {
    let mut centers = Array2::<f64>::zeros((m, n));
    let mut placed = 0;
    for _ in 0..100_000 {
        if placed == m {
            break;
        }
        let c = Array1::from_shape_fn(n, |_| r.random_range(0.25..0.75));
        let far = (0..placed).all(|k| {
            let d = &centers.row(k) - &c;
            d.dot(&d).sqrt() >= BLOB_MIN_CENTER_DISTANCE
        });
        if far {
            centers.row_mut(placed).assign(&c);
            placed += 1;
        }
    }
    if placed < m {
        return Err(Error::invalid(format!("cannot place {m} separated blob centres in {n} dimensions")));
    }
    Ok(centers)
}

/// A one-hidden-layer ReLU network whose bias classifier labels every
/// `steps` sample correctly: hidden unit `j` fires past threshold `j/m` on
/// coordinate 0, and the output scores peak at the number of fired units.
pub fn steps_reference_network(n: usize, m: usize) -> Result<Network> {
    if n == 0 || m < 2 {
        return Err(Error::invalid("steps reference needs n >= 1 and m >= 2"));
    }
    let hidden = m - 1;
    let mut w = Array2::zeros((hidden, n));
    w.column_mut(0).fill(1.0);
    let b = Array1::from_shape_fn(hidden, |j| -((j + 1) as f64) / m as f64);
    let u = Array2::from_shape_fn((m, hidden), |(k, j)| if j < k { 1.0 } else { -1.0 });
    let c = Array1::from_shape_fn(m, |k| -0.1 * k as f64);
    construct_bias_network(u.view(), w.view(), b.view(), c.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::bias_labels;

    #[test]
    fn blobs_are_deterministic_and_separated() {
        let a = gen_synthetic(SyntheticKind::Blobs, 2, 2, 500, 7).unwrap();
        let b = gen_synthetic(SyntheticKind::Blobs, 2, 2, 500, 7).unwrap();
        assert_eq!(a, b);
        let bits: Vec<u64> = a.inputs().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.inputs().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, bits_b);
        // project on the centre-difference direction: classes separated by >= 0.1
        let mean = |k: usize| {
            let idx: Vec<usize> = (0..a.len()).filter(|&i| a.labels()[i] == k).collect();
            a.select(&idx).inputs().mean_axis(ndarray::Axis(0)).unwrap()
        };
        let d = mean(1) - mean(0);
        let d = &d / d.dot(&d).sqrt();
        let proj: Vec<(f64, usize)> = (0..a.len()).map(|i| (a.inputs().row(i).dot(&d), a.labels()[i])).collect();
        let max0 = proj.iter().filter(|p| p.1 == 0).map(|p| p.0).fold(f64::MIN, f64::max);
        let min1 = proj.iter().filter(|p| p.1 == 1).map(|p| p.0).fold(f64::MAX, f64::min);
        assert!(min1 - max0 >= 0.1, "margin {}", min1 - max0);
    }

    #[test]
    fn all_kinds_stay_in_unit_cube() {
        for (kind, m) in [(SyntheticKind::Blobs, 4), (SyntheticKind::Moons, 2), (SyntheticKind::Steps, 5)] {
            let d = gen_synthetic(kind, 6, m, 300, 3).unwrap();
            assert!(d.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(d.num_classes(), m);
        }
    }

    #[test]
    fn rejects_invalid_dims() {
        assert!(gen_synthetic(SyntheticKind::Blobs, 0, 2, 10, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Blobs, 2, 2, 1, 0).is_err());
        assert!(gen_synthetic(SyntheticKind::Moons, 2, 3, 10, 0).is_err());
        assert!("spiral".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn steps_reference_network_is_exact() {
        for m in [2, 3, 7] {
            let d = gen_synthetic(SyntheticKind::Steps, 4, m, 400, 11).unwrap();
            let net = steps_reference_network(4, m).unwrap();
            let labels = bias_labels(&net, d.inputs().view()).unwrap();
            assert_eq!(labels, d.labels());
        }
    }
}
