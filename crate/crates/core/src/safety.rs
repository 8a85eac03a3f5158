//! Random first-degree augmentation `F̃(x) = F(x) + W_R·x`, direct attacks
//! on it, and empirical checks of its safety guarantees.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, original_model_attack, sign, AttackOutcome, Target};
use crate::data::LabeledDataset;
use crate::decomposition::AffineModel;
use crate::error::{Error, Result};
use crate::metrics::Classifier;
use crate::net::loss::argmax;
use crate::net::{self, ActivationPattern, Network};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFamily {
    /// Row `i` (from 1) has entries of magnitude in `((2i−1)λ, 2iλ)`.
    Banded,
    /// Entries in `(−λ, λ)`.
    Uniform,
}

impl FromStr for MatrixFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "banded" => Ok(MatrixFamily::Banded),
            "uniform" => Ok(MatrixFamily::Uniform),
            other => Err(Error::invalid(format!("unknown matrix family '{other}' (banded|uniform)"))),
        }
    }
}

impl fmt::Display for MatrixFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixFamily::Banded => "banded",
            MatrixFamily::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMatrixSpec {
    pub family: MatrixFamily,
    pub lambda: f64,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

/// Uniform draw from the open interval `(lo, hi)`.
fn open_uniform(r: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    loop {
        let v = r.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

pub fn sample_matrix(spec: &RandomMatrixSpec) -> Result<Array2<f64>> {
    let lambda = spec.lambda;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    let mut r = rng::stream(spec.seed, 0x5afe);
    let w = match spec.family {
        MatrixFamily::Uniform => Array2::from_shape_simple_fn((spec.rows, spec.cols), || open_uniform(&mut r, -lambda, lambda)),
        MatrixFamily::Banded => {
            let w = Array2::from_shape_fn((spec.rows, spec.cols), |(i, _)| {
                let k = (i + 1) as f64;
                let magnitude = open_uniform(&mut r, (2.0 * k - 1.0) * lambda, 2.0 * k * lambda);
                if r.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            });
            for i in 0..spec.rows {
                for j in i + 1..spec.rows {
                    let gap = Zip::from(w.row(i)).and(w.row(j)).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
                    assert!(spec.cols == 0 || gap > lambda, "banded rows {i},{j} closer than lambda");
                }
            }
            w
        }
    };
    Ok(w)
}

/// `F̃(x) = F(x) + W_R·x`. Its bias part is that of `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedNetwork {
    pub base: Network,
    pub w_r: Array2<f64>,
}

pub fn augment(net: Network, w_r: Array2<f64>) -> Result<AugmentedNetwork> {
    let expected = (net.num_classes(), net.input_dim());
    if w_r.dim() != expected {
        return Err(Error::shape(format!("{expected:?}"), format!("{:?}", w_r.dim())));
    }
    Ok(AugmentedNetwork { base: net, w_r })
}

impl AffineModel for AugmentedNetwork {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.base.forward(x)? + self.w_r.dot(&x))
    }

    fn logits_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.base.forward_batch(xs)? + xs.dot(&self.w_r.t()))
    }

    fn input_jacobian(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        Ok(self.base.input_jacobian(x)? + &self.w_r)
    }

    fn loss_gradient(&self, x: ArrayView1<f64>, label: usize) -> Result<Array1<f64>> {
        let offset = self.w_r.dot(&x);
        let (g, dout) = net::grad::loss_gradient_with_offset(&self.base, x, offset.view(), label)?;
        Ok(g + self.w_r.t().dot(&dout))
    }

    fn bias_part(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.base.bias_part(x)
    }

    fn bias_part_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.base.bias_part_batch(xs)
    }

    fn pattern(&self, x: ArrayView1<f64>) -> Result<ActivationPattern> {
        self.base.pattern(x)
    }
}

/// Runner-up class `ȳ = argmax_{i≠y} F_i(x)` and the A1 direction
/// `sign(∇F_ȳ − ∇F_y)`.
pub fn a1_direction(target: &dyn AffineModel, x: ArrayView1<f64>, y: usize) -> Result<(usize, Array1<f64>)> {
    let m = target.num_classes();
    if y >= m || m < 2 {
        return Err(Error::invalid(format!("label {y} needs at least two classes and y < {m}")));
    }
    let logits = target.logits(x)?;
    let runner_up = (0..m)
        .filter(|&i| i != y)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if logits[b] >= logits[i] => Some(b),
            _ => Some(i),
        })
        .expect("m >= 2");
    let jac = target.input_jacobian(x)?;
    let dir = (&jac.row(runner_up) - &jac.row(y)).mapv(sign);
    Ok((runner_up, dir))
}

/// One step `x + ρ·sign(∇F_ȳ − ∇F_y)`, clipped; judged on the bias label.
pub fn direct_attack_a1(target: &dyn AffineModel, x: ArrayView1<f64>, y: usize, rho: f64) -> Result<AttackOutcome> {
    direct_attack_a3(target, x, y, rho, 1)
}

/// `k` A1 steps of size `ρ/k`, re-deriving the runner-up and Jacobian at
/// each step.
pub fn direct_attack_a3(target: &dyn AffineModel, x: ArrayView1<f64>, y: usize, rho: f64, k: usize) -> Result<AttackOutcome> {
    if k == 0 {
        return Err(Error::invalid("a3 needs k >= 1"));
    }
    let step = rho / k as f64;
    let mut adv = x.to_owned();
    for _ in 0..k {
        let (_, dir) = a1_direction(target, adv.view(), y)?;
        Zip::from(&mut adv).and(&dir).for_each(|a, &d| *a = (*a + step * d).clamp(0.0, 1.0));
    }
    let success = target.bias_label(adv.view())? != y;
    let linf = Zip::from(x).and(&adv).fold(0.0f64, |m, a, b| m.max((a - b).abs()));
    let l0 = Zip::from(x).and(&adv).fold(0usize, |c, a, b| c + usize::from(a != b));
    Ok(AttackOutcome {
        success,
        adversary: success.then_some(adv),
        steps_used: k,
        perturbation_linf: linf,
        perturbation_l0: l0,
    })
}

/// `P(U − U' < a)` for independent `U, U' ~ U(−λ, λ)`, `0 ≤ a ≤ 2λ`.
pub fn t_function(lambda: f64, a: f64) -> Result<f64> {
    if !(lambda > 0.0) || !(0.0..=2.0 * lambda).contains(&a) {
        return Err(Error::invalid(format!("t_function needs lambda > 0 and 0 <= a <= 2·lambda, got ({lambda}, {a})")));
    }
    Ok(1.0 - (2.0 * lambda - a).powi(2) / (8.0 * lambda * lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TAudit {
    pub lambda: f64,
    pub a: f64,
    pub closed_form: f64,
    pub empirical: f64,
    pub standard_error: f64,
    pub within_3se: bool,
}

/// Monte-Carlo CDF of the difference of two uniforms against the closed form.
pub fn audit_t_function(lambda: f64, probes: &[f64], draws: usize, seed: u64) -> Result<Vec<TAudit>> {
    probes
        .iter()
        .enumerate()
        .map(|(p, &a)| {
            let closed_form = t_function(lambda, a)?;
            let mut r = rng::stream(seed, p as u64);
            let hits = (0..draws)
                .filter(|_| r.random_range(-lambda..lambda) - r.random_range(-lambda..lambda) < a)
                .count();
            let empirical = hits as f64 / draws as f64;
            let standard_error = (closed_form * (1.0 - closed_form) / draws as f64).sqrt();
            Ok(TAudit {
                lambda,
                a,
                closed_form,
                empirical,
                standard_error,
                within_3se: (empirical - closed_form).abs() <= 3.0 * standard_error,
            })
        })
        .collect()
}

/// A Bernoulli rate with its Wilson 95% interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub estimate: f64,
    pub samples: usize,
    /// Half-width of the Wilson interval.
    pub ci95: f64,
    pub lower: f64,
    pub upper: f64,
}

const Z95: f64 = 1.959_963_984_540_054;

impl RateEstimate {
    pub fn from_counts(successes: usize, samples: usize) -> Self {
        if samples == 0 {
            return RateEstimate { estimate: 0.0, samples, ci95: 1.0, lower: 0.0, upper: 1.0 };
        }
        let n = samples as f64;
        let p = successes as f64 / n;
        let z2 = Z95 * Z95;
        let denom = 1.0 + z2 / n;
        let center = (p + z2 / (2.0 * n)) / denom;
        let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
        RateEstimate {
            estimate: p,
            samples,
            ci95: half,
            lower: (center - half).max(0.0),
            upper: (center + half).min(1.0),
        }
    }
}

/// Samples whose bias label equals the ground truth, as `(index, label)`.
fn correctly_biased(model: &dyn AffineModel, data: &LabeledDataset) -> Result<Vec<(usize, usize)>> {
    let bias = model.bias_part_batch(data.inputs().view())?;
    Ok(bias
        .rows()
        .into_iter()
        .zip(data.labels())
        .enumerate()
        .filter(|(_, (b, &y))| argmax(b.view()) == y)
        .map(|(i, (_, &y))| (i, y))
        .collect())
}

/// Monte-Carlo `C(F, ρ)`: the chance that `clip(x + ρ·V)`, `V` uniform over
/// `{−1,1}^n`, changes the bias label, over correctly classified samples.
pub fn estimate_random_rate(
    model: &dyn AffineModel,
    rho: f64,
    eval_set: &LabeledDataset,
    num_directions: usize,
    seed: u64,
) -> Result<RateEstimate> {
    if num_directions == 0 {
        return Err(Error::invalid("num_directions must be >= 1"));
    }
    let eligible = correctly_biased(model, eval_set)?;
    let n = eval_set.dim();
    let counts: Vec<usize> = eligible
        .par_iter()
        .map(|&(i, y)| -> Result<usize> {
            let mut r = rng::substream(seed, i as u64, 1);
            let x = eval_set.inputs().row(i);
            let probes = Array2::from_shape_fn((num_directions, n), |(_, j)| {
                let v = if r.random::<bool>() { rho } else { -rho };
                (x[j] + v).clamp(0.0, 1.0)
            });
            let bias = model.bias_part_batch(probes.view())?;
            Ok(bias.rows().into_iter().filter(|b| argmax(b.view()) != y).count())
        })
        .collect::<Result<_>>()?;
    Ok(RateEstimate::from_counts(counts.iter().sum(), eligible.len() * num_directions))
}

/// Attacks run against an augmented network by [`estimate_creation_rate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DirectAttack {
    Identity,
    A1 { rho: f64 },
    /// FGSM on the augmented network's loss.
    A2 { rho: f64 },
    A3 { rho: f64, k: usize },
    /// Original-model attack: signed steps of `step` on `F̃`'s loss.
    Original { step: f64, steps: usize },
}

impl DirectAttack {
    fn run(self, aug: &AugmentedNetwork, x: ArrayView1<f64>, y: usize) -> Result<bool> {
        let judged = |out: AttackOutcome| -> Result<bool> {
            match out.adversary {
                Some(adv) => Ok(aug.base.bias_label(adv.view())? != y),
                None => Ok(false),
            }
        };
        let target = Target::new(aug, Classifier::Bias);
        match self {
            DirectAttack::Identity => Ok(false),
            DirectAttack::A1 { rho } => judged(direct_attack_a1(aug, x, y, rho)?),
            DirectAttack::A2 { rho } => judged(fgsm(&target, x, y, rho)?),
            DirectAttack::A3 { rho, k } => judged(direct_attack_a3(aug, x, y, rho, k)?),
            DirectAttack::Original { step, steps } => judged(original_model_attack(&target, x, y, step, steps)?),
        }
    }
}

fn draw_seed(seed: u64, draw: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (draw as u64).wrapping_add(0x9E37_79B9_7F4A_7C15)
}

/// Expected success of `attack` against `F + W_R·x` over draws of `W_R`
/// and correctly classified samples, judged by the bias label of `F`.
pub fn estimate_creation_rate(
    net: &Network,
    attack: DirectAttack,
    matrix: &RandomMatrixSpec,
    eval_set: &LabeledDataset,
    num_matrix_draws: usize,
    seed: u64,
) -> Result<RateEstimate> {
    if num_matrix_draws == 0 {
        return Err(Error::invalid("num_matrix_draws must be >= 1"));
    }
    let eligible = correctly_biased(net, eval_set)?;
    let mut successes = 0;
    for draw in 0..num_matrix_draws {
        let spec = RandomMatrixSpec {
            rows: net.num_classes(),
            cols: net.input_dim(),
            seed: draw_seed(seed ^ matrix.seed, draw),
            ..*matrix
        };
        let aug = augment(net.clone(), sample_matrix(&spec)?)?;
        let hits: Vec<bool> = eligible
            .par_iter()
            .map(|&(i, y)| attack.run(&aug, eval_set.inputs().row(i), y))
            .collect::<Result<_>>()?;
        successes += hits.iter().filter(|h| **h).count();
    }
    Ok(RateEstimate::from_counts(successes, eligible.len() * num_matrix_draws))
}

/// Largest `|∂F_i/∂x_j|` over the evaluation set.
pub fn max_jacobian_entry(model: &dyn AffineModel, eval_set: &LabeledDataset) -> Result<f64> {
    let maxima: Vec<f64> = (0..eval_set.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let j = model.input_jacobian(eval_set.inputs().row(i))?;
            Ok(j.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        })
        .collect::<Result<_>>()?;
    Ok(maxima.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub theorem: String,
    pub lambda: f64,
    pub max_jacobian_entry: f64,
    pub evaluated: usize,
    pub precondition_holds: usize,
    pub direction_matches: usize,
    pub fraction: f64,
    pub holds: bool,
}

/// For every sample and banded `W_R` draw: checks `max|W_x| < λ/2` and
/// whether the A1 direction on `F̃` equals `sign(W_{R,ȳ} − W_{R,y})`
/// componentwise. `lambda = None` uses four times the observed maximum.
pub fn verify_theorem2(
    net: &Network,
    lambda: Option<f64>,
    eval_set: &LabeledDataset,
    trials: usize,
    seed: u64,
) -> Result<Theorem2Report> {
    if trials == 0 || eval_set.is_empty() {
        return Err(Error::invalid("theorem 2 check needs trials >= 1 and a non-empty set"));
    }
    let max_w = max_jacobian_entry(net, eval_set)?;
    let lambda = lambda.unwrap_or(4.0 * max_w);
    let mut evaluated = 0;
    let mut pre = 0;
    let mut matches = 0;
    for t in 0..trials {
        let spec = RandomMatrixSpec {
            family: MatrixFamily::Banded,
            lambda,
            rows: net.num_classes(),
            cols: net.input_dim(),
            seed: draw_seed(seed, t),
        };
        let aug = augment(net.clone(), sample_matrix(&spec)?)?;
        let per_sample: Vec<(bool, bool)> = (0..eval_set.len())
            .into_par_iter()
            .map(|i| -> Result<(bool, bool)> {
                let x = eval_set.inputs().row(i);
                let y = net.bias_label(x)?;
                let jac = net.input_jacobian(x)?;
                let ok = jac.iter().all(|v| v.abs() < lambda / 2.0);
                let (runner_up, dir) = a1_direction(&aug, x, y)?;
                let expected = (&aug.w_r.row(runner_up) - &aug.w_r.row(y)).mapv(sign);
                Ok((ok, dir == expected))
            })
            .collect::<Result<_>>()?;
        evaluated += per_sample.len();
        pre += per_sample.iter().filter(|p| p.0).count();
        matches += per_sample.iter().filter(|p| p.0 && p.1).count();
    }
    let fraction = if pre == 0 { 0.0 } else { matches as f64 / pre as f64 };
    Ok(Theorem2Report {
        theorem: "2".into(),
        lambda,
        max_jacobian_entry: max_w,
        evaluated,
        precondition_holds: pre,
        direction_matches: matches,
        fraction,
        holds: pre > 0 && matches == pre,
    })
}

/// Which bound [`verify_theorem_bounds`] checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundTheorem {
    /// FGSM, banded `W_R`, two classes: `C ≤ C(F,ρ)`.
    Three,
    /// `k`-step A3, uniform `W_R`: `C ≤ C(F,ρ) + nμ/λ`.
    Four,
    /// FGSM, uniform `W_R`, two classes: `C ≤ e^{nμ/λ}·C(F,ρ)`.
    Five,
}

impl FromStr for BoundTheorem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3" => Ok(BoundTheorem::Three),
            "4" => Ok(BoundTheorem::Four),
            "5" => Ok(BoundTheorem::Five),
            other => Err(Error::invalid(format!("no bound check for theorem '{other}' (3|4|5)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: String,
    pub lambda: f64,
    pub mu: f64,
    pub rho: f64,
    pub n: usize,
    pub estimate_attack: RateEstimate,
    pub estimate_random: RateEstimate,
    pub bound: f64,
    pub holds: bool,
    /// Summed CI half-widths used as slack.
    pub ci: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub theorem: BoundTheorem,
    pub lambda: f64,
    pub rho: f64,
    /// Steps of the A3 attack (ignored for FGSM).
    pub k: usize,
    pub draws: usize,
    pub directions: usize,
    pub seed: u64,
}

/// Estimates both sides of the chosen bound and tests it up to the summed
/// CI half-widths, with `μ = 2·max|W_x|` observed on `eval_set`.
pub fn verify_theorem_bounds(net: &Network, check: &BoundCheck, eval_set: &LabeledDataset) -> Result<BoundReport> {
    let two_class = matches!(check.theorem, BoundTheorem::Three | BoundTheorem::Five);
    if two_class && net.num_classes() != 2 {
        return Err(Error::invalid(format!("theorem needs 2 classes, network has {}", net.num_classes())));
    }
    let mu = 2.0 * max_jacobian_entry(net, eval_set)?;
    let n = net.input_dim();
    let slack = n as f64 * mu / check.lambda;
    let (family, attack) = match check.theorem {
        BoundTheorem::Three => (MatrixFamily::Banded, DirectAttack::A2 { rho: check.rho }),
        BoundTheorem::Four => (MatrixFamily::Uniform, DirectAttack::A3 { rho: check.rho, k: check.k.max(1) }),
        BoundTheorem::Five => (MatrixFamily::Uniform, DirectAttack::A2 { rho: check.rho }),
    };
    let spec = RandomMatrixSpec {
        family,
        lambda: check.lambda,
        rows: net.num_classes(),
        cols: n,
        seed: check.seed,
    };
    let random = estimate_random_rate(net, check.rho, eval_set, check.directions, check.seed)?;
    let attack_rate = estimate_creation_rate(net, attack, &spec, eval_set, check.draws, check.seed.wrapping_add(1))?;
    let ci = random.ci95 + attack_rate.ci95;
    let (bound, holds) = match check.theorem {
        BoundTheorem::Three => (random.estimate, attack_rate.estimate <= random.estimate + ci),
        BoundTheorem::Four => (random.estimate + slack, attack_rate.estimate <= random.estimate + slack + ci),
        BoundTheorem::Five => {
            let factor = slack.exp();
            (
                factor * random.estimate,
                attack_rate.estimate - attack_rate.ci95 <= factor * (random.estimate + random.ci95),
            )
        }
    };
    Ok(BoundReport {
        theorem: match check.theorem {
            BoundTheorem::Three => "3",
            BoundTheorem::Four => "4",
            BoundTheorem::Five => "5",
        }
        .into(),
        lambda: check.lambda,
        mu,
        rho: check.rho,
        n,
        estimate_attack: attack_rate,
        estimate_random: random,
        bound,
        holds,
        ci,
    })
}
