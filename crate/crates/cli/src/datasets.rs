use std::fmt;
use std::path::PathBuf;

use biasclf_core::data::{gen_synthetic, load_dataset_cache, load_mnist, MnistSplit, SyntheticKind};
use biasclf_core::net::{Architecture, LayerSpec};
use biasclf_core::LabeledDataset;

use crate::settings::{CliError, CliResult};

pub const DATA_DIR_ENV: &str = "BIASCLF_DATA_DIR";

/// Where a command's samples come from:
/// `mnist[:train|:test]`, `synthetic:<kind>[:n=..][:m=..][:count=..][:seed=..]`
/// or `cache:<path>`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Mnist { dir: PathBuf, split: MnistSplit },
    Synthetic { kind: SyntheticKind, n: usize, m: usize, count: usize, seed: u64 },
    Cache(PathBuf),
}

impl DataSpec {
    /// `default_split` applies when an MNIST spec names no split.
    pub fn parse(spec: &str, data_dir: Option<&str>, default_split: MnistSplit) -> CliResult<Self> {
        let usage = |m: String| CliError::Usage(m);
        let mut parts = spec.split(':');
        match parts.next().unwrap_or("") {
            "mnist" => {
                let split = match parts.next() {
                    None => default_split,
                    Some("train") => MnistSplit::Train,
                    Some("test") => MnistSplit::Test,
                    Some(other) => return Err(usage(format!("unknown MNIST split '{other}' (train|test)"))),
                };
                if parts.next().is_some() {
                    return Err(usage(format!("bad data spec '{spec}'")));
                }
                let dir = data_dir
                    .map(String::from)
                    .or_else(|| std::env::var(DATA_DIR_ENV).ok())
                    .ok_or_else(|| usage(format!("MNIST needs --data-dir or {DATA_DIR_ENV}")))?;
                Ok(DataSpec::Mnist { dir: PathBuf::from(dir), split })
            }
            "synthetic" => {
                let kind: SyntheticKind = parts
                    .next()
                    .ok_or_else(|| usage("synthetic data needs a kind (blobs|moons|steps)".into()))?
                    .parse()
                    .map_err(|e| usage(format!("{e}")))?;
                let (mut n, mut m, mut count, mut seed) = (2usize, 2usize, 400usize, 0u64);
                for kv in parts {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| usage(format!("expected key=value in data spec, got '{kv}'")))?;
                    let bad = || usage(format!("bad value '{v}' for '{k}' in data spec"));
                    match k {
                        "n" => n = v.parse().map_err(|_| bad())?,
                        "m" => m = v.parse().map_err(|_| bad())?,
                        "count" => count = v.parse().map_err(|_| bad())?,
                        "seed" => seed = v.parse().map_err(|_| bad())?,
                        _ => return Err(usage(format!("unknown synthetic parameter '{k}' (n|m|count|seed)"))),
                    }
                }
                Ok(DataSpec::Synthetic { kind, n, m, count, seed })
            }
            "cache" => {
                let path = spec["cache:".len().min(spec.len())..].to_string();
                if path.is_empty() {
                    return Err(usage("cache data spec needs a path".into()));
                }
                Ok(DataSpec::Cache(PathBuf::from(path)))
            }
            other => Err(usage(format!("unknown data source '{other}' (mnist|synthetic|cache)"))),
        }
    }

    /// Files the spec reads, checked before any compute starts.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        match self {
            DataSpec::Mnist { dir, split } => {
                let (images, labels) = split.paths(dir);
                vec![images, labels]
            }
            DataSpec::Synthetic { .. } => Vec::new(),
            DataSpec::Cache(p) => vec![p.clone()],
        }
    }

    pub fn load(&self, limit: Option<usize>) -> CliResult<LabeledDataset> {
        let ds = match self {
            DataSpec::Mnist { dir, split } => load_mnist(dir, *split)?,
            DataSpec::Synthetic { kind, n, m, count, seed } => gen_synthetic(*kind, *n, *m, *count, *seed)?,
            DataSpec::Cache(p) => load_dataset_cache(p)?,
        };
        Ok(match limit {
            Some(k) => ds.take(k.min(ds.len())),
            None => ds,
        })
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSpec::Mnist { split, .. } => {
                write!(f, "mnist:{}", if *split == MnistSplit::Train { "train" } else { "test" })
            }
            DataSpec::Synthetic { kind, n, m, count, seed } => {
                write!(f, "synthetic:{kind}:n={n}:m={m}:count={count}:seed={seed}")
            }
            DataSpec::Cache(p) => write!(f, "cache:{}", p.display()),
        }
    }
}

/// Input shape for `arch` on flat `dim`-dimensional samples: square single
/// channel images when the architecture convolves.
pub fn input_shape(arch: &Architecture, dim: usize) -> CliResult<Vec<usize>> {
    if !arch.0.iter().any(|l| matches!(l, LayerSpec::Conv { .. })) {
        return Ok(vec![dim]);
    }
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(CliError::Usage(format!("convolutional architecture needs square inputs, got dimension {dim}")));
    }
    Ok(vec![1, side, side])
}

pub fn check_exists(paths: &[PathBuf]) -> CliResult<()> {
    match paths.iter().find(|p| !p.is_file()) {
        Some(p) => Err(CliError::Usage(format!("input file not found: {}", p.display()))),
        None => Ok(()),
    }
}
