use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use biasclf_core::attacks::{AttackKind, Budget};
use biasclf_core::data::{load_model, save_model_with_provenance, MnistSplit};
use biasclf_core::metrics::{
    config_hash, run_experiment_table, Classifier, EvalReport, ExperimentConfig, ModelEntry, Preset, REPORT_CSV_HEADER,
};
use biasclf_core::net::Architecture;
use biasclf_core::safety::{
    audit_t_function, max_jacobian_entry, verify_theorem2, verify_theorem_bounds, BoundCheck, BoundTheorem,
};
use biasclf_core::training::{train, Mode, TrainConfig};
use biasclf_core::{rng, LabeledDataset, Network};
use clap::{Arg, ArgAction, Command};
use serde_json::json;

use crate::datasets::{check_exists, input_shape, DataSpec};
use crate::settings::{CliError, CliResult, Settings};

const DEFAULT_ARCH: &str = "dense:256,dense:128,dense:10";

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).help(help).action(ArgAction::Set)
}

pub fn cli() -> Command {
    Command::new("biasclf")
        .about("Train, attack and verify bias classifiers of ReLU networks")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(opt("config", "Flat key = value file; explicit flags override it").global(true))
        .arg(opt("out", "Output directory").global(true).default_value("."))
        .arg(opt("seed", "Run seed").global(true).default_value("0"))
        .arg(opt("threads", "Worker threads (default: all cores)").global(true))
        .arg(opt("data-dir", "Directory holding the MNIST IDX files").global(true))
        .arg(opt("limit", "Use only the first N samples").global(true))
        .subcommand(
            Command::new("train")
                .about("Train a network in normal, adversarial or bias mode")
                .arg(opt("data", "Training data spec").default_value("mnist:train"))
                .arg(opt("arch", "Layer list, e.g. conv:8x5,pool,dense:128,dense:10").default_value(DEFAULT_ARCH))
                .arg(opt("mode", "normal | adversarial | bias").default_value("normal"))
                .arg(opt("epochs", "Training epochs").default_value("10"))
                .arg(opt("batch-size", "Minibatch size").default_value("64"))
                .arg(opt("lr", "Learning rate").default_value("0.01"))
                .arg(opt("momentum", "SGD momentum").default_value("0.9"))
                .arg(opt("eps", "l-inf radius of the inner maximisation").default_value("0.3"))
                .arg(opt("inner-steps", "PGD steps of the inner maximisation").default_value("10"))
                .arg(opt("inner-stepsize", "PGD step size (default 2.5·eps/steps)"))
                .arg(opt("gamma", "Weight of the full-model loss in bias mode").default_value("1.0"))
                .arg(opt("eps-warmup", "Epochs over which eps ramps up").default_value("0"))
                .arg(opt("lr-decay-every", "Decay period in epochs (0 = never)").default_value("0"))
                .arg(opt("lr-decay", "Learning-rate decay factor").default_value("0.1"))
                .arg(opt("name", "Output file stem").default_value("model")),
        )
        .subcommand(
            Command::new("attack")
                .about("Attack trained models and write rate reports")
                .arg(opt("model", "Model file, optionally as id=path; repeatable").action(ArgAction::Append))
                .arg(opt("surrogate", "Surrogate model for transfer attacks"))
                .arg(opt("data", "Evaluation data spec").default_value("mnist:test"))
                .arg(opt("preset", "Attack grid preset (table-4)"))
                .arg(opt("attacks", "Custom grid, e.g. pgd@1-3,saliency@2-40"))
                .arg(opt("classifiers", "Attacked classifiers").default_value("full,bias")),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Accuracies and random-perturbation rates")
                .arg(opt("model", "Model file, optionally as id=path; repeatable").action(ArgAction::Append))
                .arg(opt("data", "Evaluation data spec").default_value("mnist:test"))
                .arg(opt("preset", "table-1 | table-6").default_value("table-1"))
                .arg(opt("trials", "Random perturbations per sample").default_value("20")),
        )
        .subcommand(
            Command::new("verify")
                .about("Check a safety theorem or the T-function lemma")
                .arg(opt("theorem", "2 | 3 | 4 | 5"))
                .arg(opt("lemma", "t-function"))
                .arg(opt("model", "Model file"))
                .arg(opt("data", "Evaluation data spec").default_value("mnist:test"))
                .arg(opt("lambda", "Matrix scale, or auto").default_value("auto"))
                .arg(opt("rho", "Perturbation radius").default_value("0.3"))
                .arg(opt("k", "Steps of the iterated attack").default_value("5"))
                .arg(opt("trials", "Matrix draws for theorem 2").default_value("1"))
                .arg(opt("draws", "Matrix draws per sample for bound checks").default_value("20"))
                .arg(opt("directions", "Random directions per sample").default_value("20"))
                .arg(opt("probes", "T-function probe points as fractions of 2·lambda").default_value("0.125,0.25,0.5,0.75"))
                .arg(opt("samples", "Monte-Carlo draws for the lemma").default_value("1000000")),
        )
        .subcommand(
            Command::new("report")
                .about("Aggregate JSON reports into one CSV")
                .arg(opt("inputs", "Report files or directories").action(ArgAction::Append).required(true))
                .arg(opt("name", "Output file stem").default_value("summary")),
        )
}

pub fn run(name: &str, s: &Settings) -> CliResult<()> {
    match name {
        "train" => cmd_train(s),
        "attack" => cmd_attack(s),
        "evaluate" => cmd_evaluate(s),
        "verify" => cmd_verify(s),
        "report" => cmd_report(s),
        other => Err(CliError::Usage(format!("unknown subcommand '{other}'"))),
    }
}

fn seed(s: &Settings) -> CliResult<u64> {
    s.parse("seed")
}

fn data_spec(s: &Settings, default_split: MnistSplit) -> CliResult<DataSpec> {
    DataSpec::parse(s.required("data")?, s.opt("data-dir"), default_split)
}

fn load_data(s: &Settings, spec: &DataSpec) -> CliResult<LabeledDataset> {
    spec.load(s.parse_opt("limit")?)
}

/// Plain file name inside the output directory.
fn out_file(s: &Settings, name: &str) -> CliResult<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(CliError::Usage(format!("output name '{name}' must be a plain file name")));
    }
    Ok(s.out_dir().join(name))
}

fn prepare_out_dir(s: &Settings) -> CliResult<()> {
    let dir = s.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn comment_block(config: &BTreeMap<String, String>) -> String {
    config.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn model_entries(s: &Settings) -> CliResult<Vec<ModelEntry>> {
    let entries: Vec<ModelEntry> = s
        .list("model")
        .into_iter()
        .map(|m| match m.split_once('=') {
            Some((id, path)) => ModelEntry { id: id.to_string(), path: path.into() },
            None => {
                let path = PathBuf::from(&m);
                let id = path.file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or(m);
                ModelEntry { id, path }
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(CliError::Usage("--model is required".into()));
    }
    Ok(entries)
}

fn cmd_train(s: &Settings) -> CliResult<()> {
    let spec = data_spec(s, MnistSplit::Train)?;
    let arch: Architecture = s.parse("arch")?;
    let eps: f64 = s.parse("eps")?;
    let inner_steps: usize = s.parse("inner-steps")?;
    let cfg = TrainConfig {
        epochs: s.parse("epochs")?,
        batch_size: s.parse("batch-size")?,
        learning_rate: s.parse("lr")?,
        momentum: s.parse("momentum")?,
        mode: s.parse::<Mode>("mode")?,
        eps,
        inner_steps,
        inner_stepsize: s.parse_opt("inner-stepsize")?.unwrap_or(2.5 * eps / inner_steps.max(1) as f64),
        gamma: s.parse("gamma")?,
        lr_decay_every: s.parse("lr-decay-every")?,
        lr_decay: s.parse("lr-decay")?,
        eps_warmup: s.parse("eps-warmup")?,
        seed: seed(s)?,
    };
    cfg.validate()?;
    let name: String = s.parse("name")?;
    let model_path = out_file(s, &format!("{name}.json"))?;
    let log_path = out_file(s, &format!("{name}-train.csv"))?;
    check_exists(&spec.input_paths())?;
    prepare_out_dir(s)?;

    let data = load_data(s, &spec)?;
    let shape = input_shape(&arch, data.dim())?;
    let net = Network::init(shape, &arch, &mut rng::stream(cfg.seed, u64::MAX))?;
    let (net, log) = train(net, &data, &cfg)?;

    let mut prov = s.provenance("train");
    prov.insert("inner-stepsize".into(), cfg.inner_stepsize.to_string());
    prov.insert("dataset-id".into(), data.name().to_string());
    save_model_with_provenance(&net, &prov, &model_path)?;
    write_file(&log_path, &(comment_block(&prov) + &log.to_csv()))?;
    if let Some(last) = log.epochs.last() {
        println!(
            "trained {} epochs: full {:.4} bias {:.4} first-degree {:.4} -> {}",
            log.epochs.len(),
            last.full_acc,
            last.bias_acc,
            last.w_acc,
            model_path.display()
        );
    }
    Ok(())
}

fn write_report(s: &Settings, report: &EvalReport, prov: &BTreeMap<String, String>) -> CliResult<()> {
    let mut report = report.clone();
    for (k, v) in prov {
        report.config.entry(k.clone()).or_insert_with(|| v.clone());
    }
    report.config_hash = config_hash(&report.config);
    let json_path = out_file(s, &format!("{}.json", report.file_stem()))?;
    let csv_path = out_file(s, &format!("{}.csv", report.file_stem()))?;
    write_file(&json_path, &report.to_json())?;
    write_file(&csv_path, &report.to_csv())?;
    println!("{} rows -> {}", report.rows.len(), csv_path.display());
    Ok(())
}

fn attack_grid(s: &Settings) -> CliResult<ExperimentConfig> {
    let models = model_entries(s)?;
    let seed = seed(s)?;
    let mut cfg = match (s.opt("preset"), s.opt("attacks")) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --preset or --attacks, not both".into())),
        (None, None) => return Err(CliError::Usage("attack needs --preset table-4 or --attacks".into())),
        (Some(p), None) => match p.parse::<Preset>()? {
            Preset::Table4 => ExperimentConfig::preset(Preset::Table4, models, seed),
            _ => return Err(CliError::Usage(format!("preset '{p}' is not an attack grid (table-4)"))),
        },
        (None, Some(_)) => {
            let attacks = s
                .list("attacks")
                .iter()
                .map(|item| {
                    let (kind, budget) = item
                        .split_once('@')
                        .ok_or_else(|| CliError::Usage(format!("attack '{item}' must be <name>@<budget>")))?;
                    Ok((kind.parse::<AttackKind>()?, budget.parse::<Budget>()?))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let mut c = ExperimentConfig::preset(Preset::Table4, models, seed);
            c.experiment = "attack".into();
            c.attacks = attacks;
            c
        }
    };
    cfg.classifiers = s.list("classifiers").iter().map(|c| c.parse::<Classifier>()).collect::<Result<_, _>>()?;
    cfg.surrogate = s.opt("surrogate").map(|p| ModelEntry { id: "surrogate".into(), path: p.into() });
    Ok(cfg)
}

fn model_paths(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    cfg.models.iter().chain(&cfg.surrogate).map(|m| m.path.clone()).collect()
}

fn cmd_attack(s: &Settings) -> CliResult<()> {
    let spec = data_spec(s, MnistSplit::Test)?;
    let cfg = attack_grid(s)?;
    check_exists(&[spec.input_paths(), model_paths(&cfg)].concat())?;
    prepare_out_dir(s)?;
    let data = load_data(s, &spec)?;
    let report = run_experiment_table(&cfg, &data)?;
    write_report(s, &report, &s.provenance("attack"))
}

fn cmd_evaluate(s: &Settings) -> CliResult<()> {
    let spec = data_spec(s, MnistSplit::Test)?;
    let preset: Preset = s.parse("preset")?;
    if preset == Preset::Table4 {
        return Err(CliError::Usage("table-4 is an attack grid; use the attack subcommand".into()));
    }
    let mut cfg = ExperimentConfig::preset(preset, model_entries(s)?, seed(s)?);
    cfg.trials = s.parse("trials")?;
    check_exists(&[spec.input_paths(), model_paths(&cfg)].concat())?;
    prepare_out_dir(s)?;
    let data = load_data(s, &spec)?;
    let report = run_experiment_table(&cfg, &data)?;
    write_report(s, &report, &s.provenance("evaluate"))
}

enum Check {
    Theorem(String),
    TFunction,
}

fn cmd_verify(s: &Settings) -> CliResult<()> {
    let check = match (s.opt("theorem"), s.opt("lemma")) {
        (Some(t), None) if ["2", "3", "4", "5"].contains(&t) => Check::Theorem(t.to_string()),
        (Some(t), None) => return Err(CliError::Usage(format!("unknown theorem '{t}' (2|3|4|5)"))),
        (None, Some("t-function")) => Check::TFunction,
        (None, Some(l)) => return Err(CliError::Usage(format!("unknown lemma '{l}' (t-function)"))),
        _ => return Err(CliError::Usage("verify needs exactly one of --theorem or --lemma".into())),
    };
    let seed = seed(s)?;
    let lambda = match s.required("lambda")? {
        "auto" => None,
        _ => Some(s.parse::<f64>("lambda")?),
    };
    let mut prov = s.provenance("verify");
    let (label, result, holds) = match check {
        Check::TFunction => {
            let lambda = lambda.unwrap_or(1.0);
            let probes: Vec<f64> = s
                .list("probes")
                .iter()
                .map(|p| p.parse::<f64>().map(|f| 2.0 * lambda * f))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::Usage(format!("bad --probes: {e}")))?;
            let samples: usize = s.parse("samples")?;
            prepare_out_dir(s)?;
            let audits = audit_t_function(lambda, &probes, samples, seed)?;
            let holds = audits.iter().all(|a| a.within_3se);
            ("t-function".to_string(), serde_json::to_value(&audits), holds)
        }
        Check::Theorem(t) => {
            let spec = data_spec(s, MnistSplit::Test)?;
            let model = PathBuf::from(s.required("model")?);
            check_exists(&[spec.input_paths(), vec![model.clone()]].concat())?;
            let bound_params = (s.parse::<f64>("rho")?, s.parse::<usize>("k")?, s.parse::<usize>("draws")?);
            let directions: usize = s.parse("directions")?;
            let trials: usize = s.parse("trials")?;
            prepare_out_dir(s)?;
            let net = load_model(&model)?;
            let data = load_data(s, &spec)?;
            prov.insert("dataset-id".into(), data.name().to_string());
            if t == "2" {
                let r = verify_theorem2(&net, lambda, &data, trials, seed)?;
                let holds = r.holds;
                (format!("theorem-{t}"), serde_json::to_value(&r), holds)
            } else {
                let theorem: BoundTheorem = t.parse()?;
                let lambda = match lambda {
                    Some(l) => l,
                    None => 10.0 * net.input_dim() as f64 * 2.0 * max_jacobian_entry(&net, &data)?,
                };
                let (rho, k, draws) = bound_params;
                let check = BoundCheck { theorem, lambda, rho, k, draws, directions, seed };
                let r = verify_theorem_bounds(&net, &check, &data)?;
                let holds = r.holds;
                (format!("theorem-{t}"), serde_json::to_value(&r), holds)
            }
        }
    };
    let result = result.map_err(|e| CliError::Runtime(e.to_string()))?;
    let hash = config_hash(&prov);
    let doc = json!({ "check": label, "seed": seed, "config": prov, "config_hash": hash, "holds": holds, "result": result });
    let path = out_file(s, &format!("verify-{label}-{hash}-s{seed}.json"))?;
    write_file(&path, &serde_json::to_string_pretty(&doc).expect("json value serialises"))?;
    println!("{label}: {} -> {}", if holds { "holds" } else { "does not hold" }, path.display());
    if holds {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{label} does not hold; see {}", path.display())))
    }
}

fn report_files(inputs: &[String]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        let p = PathBuf::from(input);
        if p.is_dir() {
            let entries = fs::read_dir(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p);
        } else {
            return Err(CliError::Usage(format!("input not found: {}", p.display())));
        }
    }
    Ok(files)
}

fn cmd_report(s: &Settings) -> CliResult<()> {
    let files = report_files(&s.list("inputs"))?;
    let path = out_file(s, &format!("{}.csv", s.required("name")?))?;
    prepare_out_dir(s)?;
    let mut reports = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|e| CliError::Runtime(format!("{}: {e}", f.display())))?;
        match serde_json::from_str::<EvalReport>(&text) {
            Ok(r) => reports.push(r),
            Err(_) => tracing::warn!("skipping {}: not an evaluation report", f.display()),
        }
    }
    if reports.is_empty() {
        return Err(CliError::Usage("no evaluation reports among the inputs".into()));
    }
    let mut out = comment_block(&s.provenance("report"));
    out.push_str(&format!("experiment,config_hash,seed,{REPORT_CSV_HEADER}\n"));
    for r in &reports {
        for row in &r.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.experiment, r.config_hash, r.seed, row.model, row.classifier, row.metric, row.budget, row.value, row.ci95, row.samples
            ));
        }
    }
    write_file(&path, &out)?;
    println!("{} reports -> {}", reports.len(), path.display());
    Ok(())
}
