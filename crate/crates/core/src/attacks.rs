//! Gradient-based attacks on the full and bias classifiers.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::decomposition::AffineModel;
use crate::error::{Error, Result};
use crate::metrics::{classifier_labels, Classifier};
use crate::net::loss::{argmax, cross_entropy};
use crate::net::{Architecture, Network};
use crate::rng;
use crate::training::{train_normal, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    /// Present exactly when the attack succeeded.
    pub adversary: Option<Array1<f64>>,
    pub steps_used: usize,
    pub perturbation_linf: f64,
    pub perturbation_l0: usize,
}

impl AttackOutcome {
    fn new(original: ArrayView1<f64>, last: Array1<f64>, success: bool, steps_used: usize) -> Self {
        let mut linf = 0.0f64;
        let mut l0 = 0;
        Zip::from(original).and(&last).for_each(|&a, &b| {
            linf = linf.max((a - b).abs());
            l0 += usize::from(a != b);
        });
        AttackOutcome {
            success,
            adversary: success.then_some(last),
            steps_used,
            perturbation_linf: linf,
            perturbation_l0: l0,
        }
    }
}

/// The model that supplies gradients and the classifier whose label must
/// change. The two may differ: attacking the bias classifier with the full
/// model's gradients is the original-model attack.
#[derive(Clone, Copy)]
pub struct Target<'a> {
    pub gradients: &'a dyn AffineModel,
    pub judge: &'a dyn AffineModel,
    pub classifier: Classifier,
}

impl<'a> Target<'a> {
    pub fn new(model: &'a dyn AffineModel, classifier: Classifier) -> Self {
        Target {
            gradients: model,
            judge: model,
            classifier,
        }
    }

    pub fn with_gradients(self, gradients: &'a dyn AffineModel) -> Self {
        Target { gradients, ..self }
    }

    pub fn label(&self, x: ArrayView1<f64>) -> Result<usize> {
        match self.classifier {
            Classifier::Full => self.judge.full_label(x),
            Classifier::Bias => self.judge.bias_label(x),
            Classifier::FirstDegree => {
                let w = self.judge.logits(x)? - self.judge.bias_part(x)?;
                Ok(argmax(w.view()))
            }
        }
    }

    fn changed(&self, x: ArrayView1<f64>, y: usize) -> Result<bool> {
        Ok(self.label(x)? != y)
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size `rho`, clipped to `[0,1]^n`.
pub fn fgsm(target: &Target, x: ArrayView1<f64>, y: usize, rho: f64) -> Result<AttackOutcome> {
    let g = target.gradients.loss_gradient(x, y)?;
    let adv = Zip::from(x).and(&g).map_collect(|&v, &g| (v + rho * sign(g)).clamp(0.0, 1.0));
    let success = target.changed(adv.view(), y)?;
    Ok(AttackOutcome::new(x, adv, success, 1))
}

/// Signed-gradient steps of size `alpha`, projected onto the l∞ ball of
/// radius `eps` and `[0,1]^n`; stops at the first success.
pub fn pgd_linf(target: &Target, x: ArrayView1<f64>, y: usize, eps: f64, steps: usize, alpha: f64) -> Result<AttackOutcome> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("pgd eps must be > 0, got {eps}")));
    }
    let lo = x.mapv(|v| (v - eps).max(0.0));
    let hi = x.mapv(|v| (v + eps).min(1.0));
    let mut adv = x.to_owned();
    for step in 1..=steps {
        let g = target.gradients.loss_gradient(adv.view(), y)?;
        Zip::from(&mut adv).and(&g).and(&lo).and(&hi).for_each(|a, &g, &l, &h| {
            *a = (*a + alpha * sign(g)).clamp(l, h);
        });
        if target.changed(adv.view(), y)? {
            return Ok(AttackOutcome::new(x, adv, true, step));
        }
    }
    Ok(AttackOutcome::new(x, adv, false, steps))
}

/// Greedy l0 attack: saturates the unmodified pixel with the largest
/// `|∂L/∂x_j|` to 0 or 1, whichever gives the larger loss.
pub fn saliency_l0(target: &Target, x: ArrayView1<f64>, y: usize, pixel_budget: usize) -> Result<AttackOutcome> {
    let mut adv = x.to_owned();
    let mut touched = vec![false; x.len()];
    for step in 1..=pixel_budget.min(x.len()) {
        let g = target.gradients.loss_gradient(adv.view(), y)?;
        let j = (0..x.len())
            .filter(|&j| !touched[j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if g[b].abs() >= g[j].abs() => Some(b),
                _ => Some(j),
            })
            .expect("budget capped by dimension");
        touched[j] = true;
        let mut loss_at = |v: f64| -> Result<f64> {
            adv[j] = v;
            cross_entropy(target.gradients.logits(adv.view())?.view(), y)
        };
        let (l0, l1) = (loss_at(0.0)?, loss_at(1.0)?);
        adv[j] = if l1 >= l0 { 1.0 } else { 0.0 };
        if target.changed(adv.view(), y)? {
            return Ok(AttackOutcome::new(x, adv, true, step));
        }
    }
    Ok(AttackOutcome::new(x, adv, false, pixel_budget.min(x.len())))
}

/// `x ← clip(x + eps·sign(∇L_CE(F(x), y)))` for up to `max_steps` steps with
/// gradients from `target.gradients`, stopping once the judged label moves.
/// With the bias classifier as judge and the full model as gradient source
/// this is the original-model attack.
pub fn original_model_attack(target: &Target, x: ArrayView1<f64>, y: usize, eps: f64, max_steps: usize) -> Result<AttackOutcome> {
    let mut adv = x.to_owned();
    for step in 1..=max_steps {
        let g = target.gradients.loss_gradient(adv.view(), y)?;
        Zip::from(&mut adv).and(&g).for_each(|a, &g| *a = (*a + eps * sign(g)).clamp(0.0, 1.0));
        if target.changed(adv.view(), y)? {
            return Ok(AttackOutcome::new(x, adv, true, step));
        }
    }
    Ok(AttackOutcome::new(x, adv, false, max_steps))
}

/// For each class `i ≠ y`, pushes the first-degree margin with raw steps
/// `x ← clip(x + eps·(W_{x,y} − W_{x,i}))`, restarting from `x` per class.
pub fn correlation_attack(target: &Target, x: ArrayView1<f64>, y: usize, eps: f64, max_steps: usize) -> Result<AttackOutcome> {
    let mut used = 0;
    let mut farthest = x.to_owned();
    for i in (0..target.gradients.num_classes()).filter(|&i| i != y) {
        let mut adv = x.to_owned();
        for _ in 0..max_steps {
            used += 1;
            let jac = target.gradients.input_jacobian(adv.view())?;
            let dir = &jac.row(y) - &jac.row(i);
            Zip::from(&mut adv).and(&dir).for_each(|a, &d| *a = (*a + eps * d).clamp(0.0, 1.0));
            if target.changed(adv.view(), y)? {
                return Ok(AttackOutcome::new(x, adv, true, used));
            }
        }
        farthest = adv;
    }
    Ok(AttackOutcome::new(x, farthest, false, used))
}

/// A fresh network normally trained on `oracle`'s labels for the given
/// classifier.
pub fn train_surrogate(
    oracle: &Network,
    classifier: Classifier,
    queries: &LabeledDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<Network> {
    if queries.is_empty() {
        return Err(Error::invalid("surrogate query set is empty"));
    }
    let [full, bias, first] = classifier_labels(oracle, queries.inputs().view())?;
    let labels = match classifier {
        Classifier::Full => full,
        Classifier::Bias => bias,
        Classifier::FirstDegree => first,
    };
    let relabeled = queries.relabel(format!("{}-oracle", queries.name()), labels)?;
    let net = Network::init(oracle.input_shape().to_vec(), arch, &mut rng::stream(cfg.seed, u64::MAX))?;
    Ok(train_normal(net, &relabeled, cfg)?.0)
}

/// Black-box transfer: the full step budget is spent on the surrogate's
/// gradients and only the final point is shown to the judged classifier.
pub fn transfer_attack(target: &Target, x: ArrayView1<f64>, y: usize, eps: f64, steps: usize) -> Result<AttackOutcome> {
    let mut adv = x.to_owned();
    for _ in 0..steps {
        let g = target.gradients.loss_gradient(adv.view(), y)?;
        Zip::from(&mut adv).and(&g).for_each(|a, &g| *a = (*a + eps * sign(g)).clamp(0.0, 1.0));
    }
    let success = target.changed(adv.view(), y)?;
    Ok(AttackOutcome::new(x, adv, success, steps))
}

/// Adversary budgets: `1-i` moves at most `0.i` in l∞ by `10i` steps of
/// 0.01; `2-i` changes at most `i` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Linf { eps: f64, step: f64, steps: usize },
    Pixels(usize),
}

pub const LINF_STEP: f64 = 0.01;

impl Budget {
    pub fn linf(tenths: f64) -> Self {
        let eps = tenths / 10.0;
        Budget::Linf {
            eps,
            step: LINF_STEP,
            steps: (eps / LINF_STEP).round() as usize,
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad budget '{s}' (expected 1-<i> or 2-<pixels>)"));
        let (kind, amount) = s.split_once('-').ok_or_else(bad)?;
        match kind {
            "1" => {
                let tenths: f64 = amount.parse().map_err(|_| bad())?;
                if !(tenths > 0.0 && tenths <= 10.0) {
                    return Err(bad());
                }
                Ok(Budget::linf(tenths))
            }
            "2" => Ok(Budget::Pixels(amount.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Linf { eps, .. } => write!(f, "1-{}", eps * 10.0),
            Budget::Pixels(p) => write!(f, "2-{p}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Saliency,
    Original,
    Correlation,
    Transfer,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::Saliency,
        AttackKind::Original,
        AttackKind::Correlation,
        AttackKind::Transfer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Saliency => "saliency",
            AttackKind::Original => "original",
            AttackKind::Correlation => "correlation",
            AttackKind::Transfer => "transfer",
        }
    }

    /// Runs this attack within `budget`. l∞ attacks need an l∞ budget and
    /// the saliency attack a pixel budget.
    pub fn run(self, target: &Target, x: ArrayView1<f64>, y: usize, budget: Budget) -> Result<AttackOutcome> {
        match (self, budget) {
            (AttackKind::Saliency, Budget::Pixels(p)) => saliency_l0(target, x, y, p),
            (AttackKind::Saliency, _) => Err(Error::invalid("saliency needs a pixel budget (2-<i>)")),
            (_, Budget::Pixels(_)) => Err(Error::invalid(format!("{} needs an l∞ budget (1-<i>)", self.name()))),
            (AttackKind::Fgsm, Budget::Linf { eps, .. }) => fgsm(target, x, y, eps),
            (AttackKind::Pgd, Budget::Linf { eps, step, steps }) => pgd_linf(target, x, y, eps, steps, step),
            (AttackKind::Original, Budget::Linf { step, steps, .. }) => original_model_attack(target, x, y, step, steps),
            (AttackKind::Correlation, Budget::Linf { step, steps, .. }) => correlation_attack(target, x, y, step, steps),
            (AttackKind::Transfer, Budget::Linf { step, steps, .. }) => transfer_attack(target, x, y, step, steps),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = AttackKind::ALL.iter().map(|k| k.name()).collect();
            Error::invalid(format!("unknown attack '{s}' (valid: {})", names.join(", ")))
        })
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub attack_name: String,
    pub budget: String,
    pub success: bool,
    pub steps_used: usize,
    pub linf: f64,
    pub l0: usize,
}

pub const ATTACK_CSV_HEADER: &str = "sample_id,attack_name,budget,success,steps_used,linf,l0";

pub fn records_to_csv(records: &[AttackRecord]) -> String {
    let mut out = format!("{ATTACK_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id, r.attack_name, r.budget, r.success, r.steps_used, r.linf, r.l0
        ));
    }
    out
}

/// Attacks every sample the judged classifier labels correctly; other
/// samples are skipped. Records come back in dataset order.
pub fn attack_dataset(kind: AttackKind, target: &Target, data: &LabeledDataset, budget: Budget) -> Result<Vec<AttackRecord>> {
    let results: Vec<Option<AttackRecord>> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Option<AttackRecord>> {
            let (x, y) = data.sample(i);
            if target.label(x)? != y {
                return Ok(None);
            }
            let out = kind.run(target, x, y, budget)?;
            if out.success {
                debug_assert!(target.changed(out.adversary.as_ref().expect("success").view(), y)?);
            }
            Ok(Some(AttackRecord {
                sample_id: i,
                attack_name: kind.name().to_string(),
                budget: budget.to_string(),
                success: out.success,
                steps_used: out.steps_used,
                linf: out.perturbation_linf,
                l0: out.perturbation_l0,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use ndarray::array;

    fn affine(a: ndarray::Array2<f64>, c: Array1<f64>) -> Network {
        Network::new(vec![a.ncols()], vec![Layer::Dense { weights: a, biases: c }]).unwrap()
    }

    #[test]
    fn fgsm_direction_on_affine_net() {
        let net = affine(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
        let t = Target::new(&net, Classifier::Full);
        let x = array![0.8, 0.2];
        let out = fgsm(&t, x.view(), 0, 0.05).unwrap();
        assert!((out.perturbation_linf - 0.05).abs() < 1e-15);
        assert!(!out.success);
        let adv = fgsm(&t, x.view(), 0, 0.4).unwrap();
        assert!(adv.success);
        let d = adv.adversary.unwrap() - &x;
        assert!(d[0] < 0.0 && d[1] > 0.0);
        let zero = fgsm(&t, x.view(), 0, 0.0).unwrap();
        assert!(!zero.success && zero.perturbation_l0 == 0);
    }

    #[test]
    fn one_step_pgd_is_fgsm() {
        let net = affine(array![[2.0, -1.0, 0.5], [-1.0, 1.0, 0.0], [0.0, 0.3, 1.0]], array![0.1, 0.0, -0.1]);
        let t = Target::new(&net, Classifier::Full);
        let x = array![0.5, 0.4, 0.3];
        let y = t.label(x.view()).unwrap();
        for rho in [0.05, 0.2, 0.6] {
            let a = fgsm(&t, x.view(), y, rho).unwrap();
            let b = pgd_linf(&t, x.view(), y, rho, 1, rho).unwrap();
            assert_eq!(a.success, b.success);
            assert_eq!(a.perturbation_linf, b.perturbation_linf);
        }
    }

    #[test]
    fn pgd_stays_in_ball() {
        let net = affine(array![[1.0, -1.0], [-1.0, 1.0]], array![0.5, 0.0]);
        let t = Target::new(&net, Classifier::Full);
        let x = array![0.5, 0.5];
        let out = pgd_linf(&t, x.view(), 0, 0.1, 50, 0.03).unwrap();
        assert!(out.perturbation_linf <= 0.1 + 1e-15);
        assert!(!out.success);
        assert!(pgd_linf(&t, x.view(), 0, 0.0, 5, 0.01).is_err());
    }

    #[test]
    fn saliency_respects_budget() {
        let net = affine(array![[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]], array![-1.0, 0.0]);
        let t = Target::new(&net, Classifier::Full);
        let x = array![0.5, 0.4, 0.6, 0.7];
        let none = saliency_l0(&t, x.view(), 0, 0).unwrap();
        assert!(!none.success && none.perturbation_l0 == 0);
        let one = saliency_l0(&t, x.view(), 0, 1).unwrap();
        assert!(one.perturbation_l0 <= 1 && !one.success);
        // equal saliencies: pixels are taken in index order
        assert!(!saliency_l0(&t, x.view(), 0, 2).unwrap().success);
        let three = saliency_l0(&t, x.view(), 0, 3).unwrap();
        assert!(three.success && three.perturbation_l0 == 3);
        assert_eq!(three.adversary.unwrap(), array![0.0, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn affine_bias_classifier_cannot_be_moved() {
        let net = affine(array![[3.0, -2.0], [-1.0, 4.0]], array![1.0, 0.0]);
        let t = Target::new(&net, Classifier::Bias);
        let x = array![0.3, 0.9];
        assert!(!original_model_attack(&t, x.view(), 0, 0.01, 100).unwrap().success);
        let corr = correlation_attack(&t, x.view(), 0, 0.01, 20).unwrap();
        assert!(!corr.success && corr.steps_used == 20);
        // the full classifier of the same net falls
        assert!(original_model_attack(&Target::new(&net, Classifier::Full), x.view(), 0, 0.01, 100).unwrap().success);
    }

    #[test]
    fn original_model_attack_crosses_a_bias_region() {
        // one unit ReLU(0.5 - x): bias label 0 while it fires, 1 once it is off
        let net = Network::new(
            vec![1],
            vec![
                Layer::Dense { weights: array![[-1.0]], biases: array![0.5] },
                Layer::Dense { weights: array![[1.0], [0.0]], biases: array![0.0, 0.3] },
            ],
        )
        .unwrap();
        let t = Target::new(&net, Classifier::Bias);
        let x = array![0.45];
        assert_eq!(t.label(x.view()).unwrap(), 0);
        let out = original_model_attack(&t, x.view(), 0, 0.01, 10).unwrap();
        assert!(out.success, "{out:?}");
        assert!(out.steps_used <= 6);
        assert_eq!(t.label(out.adversary.unwrap().view()).unwrap(), 1);
    }

    #[test]
    fn budgets_parse() {
        assert_eq!("1-3".parse::<Budget>().unwrap(), Budget::Linf { eps: 0.3, step: 0.01, steps: 30 });
        assert_eq!("2-40".parse::<Budget>().unwrap(), Budget::Pixels(40));
        assert_eq!(Budget::linf(1.0).to_string(), "1-1");
        assert!("3-1".parse::<Budget>().is_err());
        assert!("1-x".parse::<Budget>().is_err());
        let err = "cw".parse::<AttackKind>().unwrap_err().to_string();
        assert!(err.contains("fgsm") && err.contains("transfer"), "{err}");
    }

    #[test]
    fn constant_surrogate_transfers_nothing() {
        let oracle = affine(array![[0.0, 0.0], [0.0, 0.0]], array![1.0, 0.0]);
        let data = crate::data::gen_synthetic(crate::data::SyntheticKind::Blobs, 2, 2, 40, 1).unwrap();
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let sur = train_surrogate(&oracle, Classifier::Bias, &data, &Architecture::mlp(&[4], 2), &cfg).unwrap();
        let t = Target::new(&oracle, Classifier::Bias).with_gradients(&sur);
        let class0 = data.select(&(0..40).step_by(2).collect::<Vec<_>>());
        let recs = attack_dataset(AttackKind::Transfer, &t, &class0, Budget::linf(3.0)).unwrap();
        assert_eq!(recs.len(), 20);
        assert!(recs.iter().all(|r| !r.success));
        assert!(records_to_csv(&recs).starts_with(ATTACK_CSV_HEADER));
    }
}
