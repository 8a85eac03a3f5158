//! Normal, adversarial and bias-part training by mini-batch SGD.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracies, Accuracies};
use crate::net::{grad_params, input_gradients, LossSpec, Network, Sgd};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Adversarial,
    Bias,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Mode::Normal),
            "adversarial" => Ok(Mode::Adversarial),
            "bias" => Ok(Mode::Bias),
            other => Err(Error::invalid(format!("unknown mode '{other}' (normal|adversarial|bias)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Normal => "normal",
            Mode::Adversarial => "adversarial",
            Mode::Bias => "bias",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mode: Mode,
    /// l∞ radius of the inner maximisation.
    pub eps: f64,
    pub inner_steps: usize,
    pub inner_stepsize: f64,
    /// Weight of `L_CE(F(x+ζ), y)` in bias mode.
    pub gamma: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every`
    /// epochs; 0 disables decay.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    /// Grow eps linearly over this many epochs; 0 uses the full eps at once.
    pub eps_warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            mode: Mode::Normal,
            eps: 0.3,
            inner_steps: 10,
            inner_stepsize: 0.05,
            gamma: 1.0,
            lr_decay_every: 0,
            lr_decay: 0.1,
            eps_warmup: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(Error::invalid(what.to_string())) };
        check(self.epochs > 0, "epochs must be positive")?;
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be > 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0,1)")?;
        check(self.eps >= 0.0 && self.eps.is_finite(), "eps must be >= 0")?;
        check(self.inner_stepsize >= 0.0 && self.inner_stepsize.is_finite(), "inner_stepsize must be >= 0")?;
        check(self.gamma >= 0.0 && self.gamma.is_finite(), "gamma must be >= 0")?;
        check(self.lr_decay > 0.0 && self.lr_decay.is_finite(), "lr_decay must be > 0")?;
        Ok(())
    }

    /// Loss minimised by the outer update.
    pub fn loss_spec(&self) -> LossSpec {
        match self.mode {
            Mode::Normal | Mode::Adversarial => LossSpec::Full,
            Mode::Bias => LossSpec::Combined { gamma: self.gamma },
        }
    }

    fn eps_at(&self, epoch: usize) -> f64 {
        if epoch >= self.eps_warmup {
            self.eps
        } else {
            self.eps * (epoch + 1) as f64 / self.eps_warmup as f64
        }
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.learning_rate,
            k => self.learning_rate * self.lr_decay.powi((epoch / k) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub full_acc: f64,
    pub bias_acc: f64,
    pub w_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,full_acc,bias_acc,w_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.mean_loss, e.full_acc, e.bias_acc, e.w_acc));
        }
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Input-gradient weight of the full-model term; the bias term has zero
/// input gradient almost everywhere.
fn input_weight(loss: LossSpec) -> f64 {
    match loss {
        LossSpec::Full => 1.0,
        LossSpec::Bias => 0.0,
        LossSpec::Combined { gamma } => gamma,
    }
}

/// Sign-gradient ascent on the loss, kept inside the l∞ ball of radius `eps`
/// around `x` and inside `[0,1]^n`.
pub fn pgd_inner_max(
    net: &Network,
    x: ArrayView1<f64>,
    y: usize,
    eps: f64,
    steps: usize,
    stepsize: f64,
    loss: LossSpec,
) -> Result<Array1<f64>> {
    let xs = x.insert_axis(Axis(0));
    Ok(pgd_inner_max_batch(net, xs, &[y], eps, steps, stepsize, loss)?.row(0).to_owned())
}

/// Row-wise [`pgd_inner_max`].
pub fn pgd_inner_max_batch(
    net: &Network,
    xs: ArrayView2<f64>,
    labels: &[usize],
    eps: f64,
    steps: usize,
    stepsize: f64,
    loss: LossSpec,
) -> Result<Array2<f64>> {
    net.check_batch(xs)?;
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
    }
    let mut adv = xs.to_owned();
    let weight = input_weight(loss);
    if eps == 0.0 || steps == 0 || stepsize == 0.0 || weight == 0.0 {
        return Ok(adv);
    }
    let lo = xs.mapv(|v| (v - eps).max(0.0));
    let hi = xs.mapv(|v| (v + eps).min(1.0));
    for _ in 0..steps {
        let (g, _) = input_gradients(net, adv.view(), labels)?;
        Zip::from(&mut adv).and(&g).and(&lo).and(&hi).for_each(|a, &g, &l, &h| {
            *a = (*a + stepsize * sign(g)).clamp(l, h);
        });
    }
    // x ± eps is rounded once, so allow one ulp of slack
    debug_assert!(Zip::from(&adv)
        .and(xs)
        .all(|&a, &x| (a - x).abs() <= eps + f64::EPSILON && (0.0..=1.0).contains(&a)));
    Ok(adv)
}

/// Trains according to `cfg.mode`, returning the trained network and the
/// per-epoch log (accuracies measured on `dataset`).
pub fn train(mut net: Network, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if dataset.dim() != net.input_dim() || dataset.num_classes() != net.num_classes() {
        return Err(Error::shape(
            format!("dataset of dim {} with {} classes", net.input_dim(), net.num_classes()),
            format!("dim {} with {} classes", dataset.dim(), dataset.num_classes()),
        ));
    }
    let loss = cfg.loss_spec();
    let perturb = cfg.mode != Mode::Normal;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        opt.learning_rate = cfg.learning_rate_at(epoch);
        let eps = cfg.eps_at(epoch);
        let stepsize = cfg.inner_stepsize * eps / cfg.eps.max(f64::MIN_POSITIVE);
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = dataset.select(chunk);
            let xs = if perturb {
                pgd_inner_max_batch(
                    &net,
                    batch.inputs().view(),
                    batch.labels(),
                    eps,
                    cfg.inner_steps,
                    stepsize,
                    loss,
                )?
            } else {
                batch.inputs().clone()
            };
            let (batch_loss, grads) = grad_params(&net, xs.view(), batch.labels(), loss)?;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {batch_loss} at epoch {epoch}, batch {b} (learning rate {})",
                    opt.learning_rate
                )));
            }
            opt.step(&mut net, &grads)?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let Accuracies { full, bias, first_degree } = accuracies(&net, dataset)?;
        let metrics = EpochMetrics {
            epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            full_acc: full,
            bias_acc: bias,
            w_acc: first_degree,
        };
        tracing::info!(
            mode = %cfg.mode,
            epoch,
            loss = metrics.mean_loss,
            full_acc = metrics.full_acc,
            bias_acc = metrics.bias_acc,
            w_acc = metrics.w_acc,
            "epoch done"
        );
        log.epochs.push(metrics);
    }
    Ok((net, log))
}

pub fn train_normal(net: Network, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    train(net, dataset, &TrainConfig { mode: Mode::Normal, ..cfg.clone() })
}

pub fn train_adversarial(net: Network, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    train(net, dataset, &TrainConfig { mode: Mode::Adversarial, ..cfg.clone() })
}

pub fn train_bias(net: Network, dataset: &LabeledDataset, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    train(net, dataset, &TrainConfig { mode: Mode::Bias, ..cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::net::tests::one_unit_net;
    use crate::net::Architecture;
    use ndarray::array;

    fn blobs() -> LabeledDataset {
        gen_synthetic(SyntheticKind::Blobs, 2, 2, 500, 7).unwrap()
    }

    fn fresh(seed: u64) -> Network {
        Network::init(vec![2], &Architecture::mlp(&[16, 16], 2), &mut rng::stream(seed, 99)).unwrap()
    }

    #[test]
    fn inner_max_trivial_cases() {
        let net = one_unit_net();
        let x = array![0.7];
        assert_eq!(pgd_inner_max(&net, x.view(), 0, 0.0, 5, 0.1, LossSpec::Full).unwrap(), x);
        assert_eq!(pgd_inner_max(&net, x.view(), 0, 0.1, 0, 0.1, LossSpec::Full).unwrap(), x);
    }

    #[test]
    fn inner_max_on_single_logit_toy_clips_at_the_ball() {
        // two logits [F, 0] so the loss of class 1 grows with the active logit 2x - 1 + ...
        let net = Network::new(
            vec![1],
            vec![
                crate::Layer::Dense { weights: array![[1.0]], biases: array![-0.5] },
                crate::Layer::Dense { weights: array![[2.0], [0.0]], biases: array![1.0, 0.0] },
            ],
        )
        .unwrap();
        let x = array![0.7];
        let adv = pgd_inner_max(&net, x.view(), 1, 0.1, 3, 0.05, LossSpec::Full).unwrap();
        assert!((adv[0] - 0.8).abs() < 1e-15, "{adv}");
    }

    #[test]
    fn bias_only_loss_has_no_input_direction() {
        let net = one_unit_net();
        let x = array![0.7];
        assert_eq!(pgd_inner_max(&net, x.view(), 0, 0.3, 5, 0.1, LossSpec::Bias).unwrap(), x);
    }

    #[test]
    fn normal_training_fits_blobs() {
        let cfg = TrainConfig { epochs: 20, batch_size: 32, learning_rate: 0.05, ..Default::default() };
        let (_, log) = train_normal(fresh(1), &blobs(), &cfg).unwrap();
        assert!(log.epochs.last().unwrap().full_acc >= 0.99, "{:?}", log.epochs.last());
        assert!(log.to_csv().starts_with(TrainLog::CSV_HEADER));
        assert_eq!(log.to_csv().lines().count(), 21);
    }

    #[test]
    fn adversarial_with_zero_eps_matches_normal() {
        let cfg = TrainConfig { epochs: 3, eps: 0.0, learning_rate: 0.05, seed: 4, ..Default::default() };
        let (a, la) = train_normal(fresh(2), &blobs(), &cfg).unwrap();
        let (b, lb) = train_adversarial(fresh(2), &blobs(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn equal_seeds_give_identical_trajectories() {
        let cfg = TrainConfig { epochs: 2, eps: 0.1, inner_steps: 3, inner_stepsize: 0.04, seed: 9, ..Default::default() };
        for mode in [Mode::Normal, Mode::Adversarial, Mode::Bias] {
            let cfg = TrainConfig { mode, ..cfg.clone() };
            let (a, _) = train(fresh(3), &blobs(), &cfg).unwrap();
            let (b, _) = train(fresh(3), &blobs(), &cfg).unwrap();
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn bias_training_makes_the_bias_classifier_accurate() {
        let data = gen_synthetic(SyntheticKind::Blobs, 10, 4, 800, 3).unwrap();
        let net = Network::init(vec![10], &Architecture::mlp(&[64, 64], 4), &mut rng::stream(8, 99)).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.02,
            eps: 0.05,
            inner_steps: 3,
            inner_stepsize: 0.02,
            ..Default::default()
        };
        let (_, normal) = train_normal(net.clone(), &data, &cfg).unwrap();
        let (_, bias) = train_bias(net, &data, &cfg).unwrap();
        assert!(normal.epochs.last().unwrap().bias_acc < 0.5, "{:?}", normal.epochs.last());
        assert!(bias.epochs.last().unwrap().bias_acc >= 0.95, "{:?}", bias.epochs.last());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e200, ..Default::default() };
        assert!(matches!(train_normal(fresh(6), &blobs(), &cfg), Err(Error::Divergence(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { gamma: -1.0, ..Default::default() },
            TrainConfig { eps: -0.1, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
        assert!("sgd".parse::<Mode>().is_err());
    }
}
