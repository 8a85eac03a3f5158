//! Accuracy of the full, bias and first-degree classifiers, random
//! perturbation rates, and table-shaped experiment reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackKind, Budget, Target};
use crate::data::{load_model, LabeledDataset};
use crate::error::{Error, Result};
use crate::net::loss::argmax;
use crate::net::Network;
use crate::rng;
use crate::safety::RateEstimate;

/// Which part of `F(x) = W_x·x + B_x` decides the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    Full,
    Bias,
    FirstDegree,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracies {
    pub full: f64,
    pub bias: f64,
    pub first_degree: f64,
}

const EVAL_CHUNK: usize = 512;

/// Labels of all three classifiers for every sample.
pub fn classifier_labels(net: &Network, inputs: ndarray::ArrayView2<f64>) -> Result<[Vec<usize>; 3]> {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for chunk in inputs.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let (logits, bias) = net.logits_and_bias_batch(chunk)?;
        let first = &logits - &bias;
        for (slot, m) in out.iter_mut().zip([&logits, &bias, &first]) {
            slot.extend(m.rows().into_iter().map(argmax));
        }
    }
    Ok(out)
}

pub fn accuracies(net: &Network, dataset: &LabeledDataset) -> Result<Accuracies> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let [full, bias, first] = classifier_labels(net, dataset.inputs().view())?;
    let frac = |pred: &[usize]| {
        pred.iter().zip(dataset.labels()).filter(|(p, y)| p == y).count() as f64 / dataset.len() as f64
    };
    Ok(Accuracies {
        full: frac(&full),
        bias: frac(&bias),
        first_degree: frac(&first),
    })
}

pub fn accuracy(net: &Network, dataset: &LabeledDataset, classifier: Classifier) -> Result<f64> {
    let a = accuracies(net, dataset)?;
    Ok(match classifier {
        Classifier::Full => a.full,
        Classifier::Bias => a.bias,
        Classifier::FirstDegree => a.first_degree,
    })
}

/// Samples the classifier labels correctly, as `(index, label)`.
fn correctly_labelled(net: &Network, data: &LabeledDataset, classifier: Classifier) -> Result<Vec<(usize, usize)>> {
    let labels = pick(classifier_labels(net, data.inputs().view())?, classifier);
    Ok(labels
        .into_iter()
        .zip(data.labels())
        .enumerate()
        .filter(|(_, (p, y))| p == *y)
        .map(|(i, (_, &y))| (i, y))
        .collect())
}

fn pick(labels: [Vec<usize>; 3], classifier: Classifier) -> Vec<usize> {
    let [full, bias, first] = labels;
    match classifier {
        Classifier::Full => full,
        Classifier::Bias => bias,
        Classifier::FirstDegree => first,
    }
}

/// Label-change rate of `trials` random perturbations per correctly
/// classified sample; `perturb` fills one perturbed copy of `x`.
fn random_rate(
    net: &Network,
    data: &LabeledDataset,
    classifier: Classifier,
    trials: usize,
    seed: u64,
    perturb: impl Fn(&mut rng::TaskRng, ArrayView1<f64>, ndarray::ArrayViewMut1<f64>) + Sync,
) -> Result<RateEstimate> {
    let eligible = correctly_labelled(net, data, classifier)?;
    let counts: Vec<usize> = eligible
        .par_iter()
        .map(|&(i, y)| -> Result<usize> {
            let mut r = rng::substream(seed, i as u64, 2);
            let x = data.inputs().row(i);
            let mut probes = Array2::zeros((trials, data.dim()));
            for row in probes.rows_mut() {
                perturb(&mut r, x, row);
            }
            let labels = pick(classifier_labels(net, probes.view())?, classifier);
            Ok(labels.into_iter().filter(|&p| p != y).count())
        })
        .collect::<Result<_>>()?;
    Ok(RateEstimate::from_counts(counts.iter().sum(), eligible.len() * trials))
}

/// R1: flip `pixels` randomly chosen coordinates `b → 1 − b`.
pub fn r1_rate(
    net: &Network,
    data: &LabeledDataset,
    classifier: Classifier,
    pixels: usize,
    trials: usize,
    seed: u64,
) -> Result<RateEstimate> {
    let pixels = pixels.min(data.dim());
    random_rate(net, data, classifier, trials, seed, |r, x, mut out| {
        out.assign(&x);
        for j in rand::seq::index::sample(r, x.len(), pixels) {
            out[j] = 1.0 - x[j];
        }
    })
}

/// R2: shift every coordinate by `±amplitude` with equal odds, clipped.
pub fn r2_rate(
    net: &Network,
    data: &LabeledDataset,
    classifier: Classifier,
    amplitude: f64,
    trials: usize,
    seed: u64,
) -> Result<RateEstimate> {
    random_rate(net, data, classifier, trials, seed, |r, x, mut out| {
        for (o, &v) in out.iter_mut().zip(x) {
            let s = if r.random::<bool>() { amplitude } else { -amplitude };
            *o = (v + s).clamp(0.0, 1.0);
        }
    })
}

impl FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Classifier::Full),
            "bias" => Ok(Classifier::Bias),
            "first-degree" | "w" => Ok(Classifier::FirstDegree),
            other => Err(Error::invalid(format!("unknown classifier '{other}' (full|bias|first-degree)"))),
        }
    }
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classifier::Full => "full",
            Classifier::Bias => "bias",
            Classifier::FirstDegree => "first-degree",
        })
    }
}

/// One number of a report: an accuracy or a rate with its Wilson interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub classifier: String,
    pub metric: String,
    pub budget: String,
    pub value: f64,
    pub ci95: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub dataset_id: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

pub const REPORT_CSV_HEADER: &str = "model,classifier,metric,budget,value,ci95,samples";

/// FNV-1a over `key=value` lines in key order.
pub fn config_hash(config: &BTreeMap<String, String>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in config {
        for b in k.bytes().chain(*b"=").chain(v.bytes()).chain(*b"\n") {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// CSV rows preceded by `#`-comment lines carrying the config and seed.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# experiment={} dataset={} seed={}\n", self.experiment, self.dataset_id, self.seed);
        for (k, v) in &self.config {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model, r.classifier, r.metric, r.budget, r.value, r.ci95, r.samples
            ));
        }
        out
    }

    /// File stem embedding the config hash and seed.
    pub fn file_stem(&self) -> String {
        format!("{}-{}-s{}", self.experiment, self.config_hash, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Accuracies of the first-degree, bias and full classifiers.
    Table1,
    /// l∞ original-model attacks 1-1..1-3 and l0 attacks 2-40..2-80.
    Table4,
    /// Random perturbations R1 (60 flipped pixels) and R2 (±0.2).
    Table6,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table-1" | "table1" => Ok(Preset::Table1),
            "table-4" | "table4" => Ok(Preset::Table4),
            "table-6" | "table6" => Ok(Preset::Table6),
            other => Err(Error::invalid(format!("unknown preset '{other}' (table-1|table-4|table-6)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RandomPerturbation {
    R1 { pixels: usize },
    R2 { amplitude: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelEntry {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub models: Vec<ModelEntry>,
    /// Surrogate used by transfer attacks.
    pub surrogate: Option<ModelEntry>,
    pub classifiers: Vec<Classifier>,
    pub attacks: Vec<(AttackKind, Budget)>,
    pub random: Vec<RandomPerturbation>,
    pub trials: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, models: Vec<ModelEntry>, seed: u64) -> Self {
        let base = ExperimentConfig {
            experiment: String::new(),
            models,
            surrogate: None,
            classifiers: vec![Classifier::FirstDegree, Classifier::Bias, Classifier::Full],
            attacks: Vec::new(),
            random: Vec::new(),
            trials: 20,
            seed,
        };
        match preset {
            Preset::Table1 => ExperimentConfig { experiment: "table-1".into(), ..base },
            Preset::Table4 => ExperimentConfig {
                experiment: "table-4".into(),
                classifiers: vec![Classifier::Full, Classifier::Bias],
                attacks: [Budget::linf(1.0), Budget::linf(2.0), Budget::linf(3.0)]
                    .into_iter()
                    .map(|b| (AttackKind::Original, b))
                    .chain([40, 60, 80].into_iter().map(|p| (AttackKind::Saliency, Budget::Pixels(p))))
                    .collect(),
                ..base
            },
            Preset::Table6 => ExperimentConfig {
                experiment: "table-6".into(),
                classifiers: vec![Classifier::Full, Classifier::Bias],
                random: vec![RandomPerturbation::R1 { pixels: 60 }, RandomPerturbation::R2 { amplitude: 0.2 }],
                ..base
            },
        }
    }

    /// Flat description used for provenance and hashing.
    pub fn describe(&self, dataset: &LabeledDataset) -> BTreeMap<String, String> {
        let mut c = BTreeMap::new();
        c.insert("experiment".into(), self.experiment.clone());
        c.insert("dataset".into(), format!("{} ({} samples)", dataset.name(), dataset.len()));
        let models: Vec<String> = self.models.iter().map(|m| format!("{}={}", m.id, m.path.display())).collect();
        c.insert("models".into(), models.join(";"));
        if let Some(s) = &self.surrogate {
            c.insert("surrogate".into(), s.path.display().to_string());
        }
        let cls: Vec<String> = self.classifiers.iter().map(|c| c.to_string()).collect();
        c.insert("classifiers".into(), cls.join(";"));
        let attacks: Vec<String> = self.attacks.iter().map(|(k, b)| format!("{k}@{b}")).collect();
        c.insert("attacks".into(), attacks.join(";"));
        let random: Vec<String> = self.random.iter().map(|r| format!("{r:?}")).collect();
        c.insert("random".into(), random.join(";"));
        c.insert("trials".into(), self.trials.to_string());
        c.insert("seed".into(), self.seed.to_string());
        c
    }
}

/// Runs the accuracy, attack and random-perturbation grid of `cfg` on
/// `dataset`. Attack and random rates count only correctly classified
/// samples.
pub fn run_experiment_table(cfg: &ExperimentConfig, dataset: &LabeledDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let models: Vec<(String, Network)> = cfg
        .models
        .iter()
        .map(|m| Ok((m.id.clone(), load_model(&m.path)?)))
        .collect::<Result<_>>()?;
    let surrogate = cfg.surrogate.as_ref().map(|s| load_model(&s.path)).transpose()?;
    if surrogate.is_none() && cfg.attacks.iter().any(|(k, _)| *k == AttackKind::Transfer) {
        return Err(Error::invalid("transfer attacks need a surrogate model"));
    }
    let mut rows = Vec::new();
    for (id, net) in &models {
        let acc = accuracies(net, dataset)?;
        for &c in &cfg.classifiers {
            let value = match c {
                Classifier::Full => acc.full,
                Classifier::Bias => acc.bias,
                Classifier::FirstDegree => acc.first_degree,
            };
            let hits = (value * dataset.len() as f64).round() as usize;
            rows.push(ReportRow {
                model: id.clone(),
                classifier: c.to_string(),
                metric: "accuracy".into(),
                budget: String::new(),
                value,
                ci95: RateEstimate::from_counts(hits, dataset.len()).ci95,
                samples: dataset.len(),
            });
        }
        for &c in &cfg.classifiers {
            for &(kind, budget) in &cfg.attacks {
                let mut target = Target::new(net, c);
                if kind == AttackKind::Transfer {
                    target = target.with_gradients(surrogate.as_ref().expect("checked above"));
                }
                let records = attack_dataset(kind, &target, dataset, budget)?;
                let rate = RateEstimate::from_counts(records.iter().filter(|r| r.success).count(), records.len());
                rows.push(rate_row(id, c, kind.name(), &budget.to_string(), rate));
            }
            for (k, &perturbation) in cfg.random.iter().enumerate() {
                let seed = cfg.seed.wrapping_add(k as u64);
                let (name, budget, rate) = match perturbation {
                    RandomPerturbation::R1 { pixels } => {
                        ("r1", pixels.to_string(), r1_rate(net, dataset, c, pixels, cfg.trials, seed)?)
                    }
                    RandomPerturbation::R2 { amplitude } => {
                        ("r2", amplitude.to_string(), r2_rate(net, dataset, c, amplitude, cfg.trials, seed)?)
                    }
                };
                rows.push(rate_row(id, c, name, &budget, rate));
            }
        }
    }
    let config = cfg.describe(dataset);
    Ok(EvalReport {
        experiment: cfg.experiment.clone(),
        dataset_id: dataset.name().to_string(),
        seed: cfg.seed,
        config_hash: config_hash(&config),
        config,
        rows,
        notes: vec![
            "rates count only samples the classifier labels correctly".into(),
            "architectures and data are desk-scale; comparisons with published numbers are directional".into(),
        ],
    })
}

fn rate_row(model: &str, c: Classifier, metric: &str, budget: &str, rate: RateEstimate) -> ReportRow {
    ReportRow {
        model: model.to_string(),
        classifier: c.to_string(),
        metric: metric.to_string(),
        budget: budget.to_string(),
        value: rate.estimate,
        ci95: rate.ci95,
        samples: rate.samples,
    }
}
