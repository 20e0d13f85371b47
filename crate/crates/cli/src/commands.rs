use std::path::{Path, PathBuf};

use cyin_core::config::hex_digest;
use cyin_core::data::sidecar_path;
use cyin_core::metrics::{csv_cell, format_metric, mean_std, metric_names};
use cyin_core::{
    evaluate, load_checkpoint, read_dataset, save_checkpoint, train as train_model, write_dataset, CyinModel, Dataset,
    DatasetSpec, ExperimentConfig, MetricReport, MultimodalSample, Protocol, Task,
};

use crate::args::{EvalArgs, GenDataArgs, ReportArgs, TaskArg, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{create_dir, unix_now, write_file, Manifest, RunKind};

pub const SEED_ENV: &str = "CYIN_SEED";

fn require_file(path: &Path, flag: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag} {}: no such file", path.display())))
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let task = match a.task {
        TaskArg::Regression => Task::Regression,
        TaskArg::Classification => Task::Classification,
    };
    let num_classes = match (task, a.classes) {
        (Task::Classification, Some(k)) => k,
        (Task::Classification, None) => return Err(CliError::usage("--classes is required with --task classification")),
        (Task::Regression, Some(_)) => return Err(CliError::usage("--classes only applies to --task classification")),
        (Task::Regression, None) => 0,
    };
    let feat_dims = match a.feat_dims.as_slice() {
        [d] => vec![*d; a.modalities],
        dims => dims.to_vec(),
    };
    let spec = DatasetSpec {
        num_modalities: a.modalities,
        seq_len: a.seq_len,
        feat_dims,
        latent_dim: a.latent_dim,
        task,
        num_classes,
        noise_scale: a.noise,
        distractor_dim: a.distractor_dim,
        num_samples: a.samples,
        seed: a.seed,
    };
    let data = Dataset::generate(&spec)?;
    write_dataset(&spec, &data.samples, &a.out)?;
    let bytes = std::fs::read(&a.out).map_err(|e| CliError::runtime(format!("{}: {e}", a.out.display())))?;
    println!("{}  {}", hex_digest(&bytes), a.out.display());
    println!("metadata: {}", sidecar_path(&a.out).display());
    Ok(())
}

fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

/// Dataset from a file (whose spec replaces the config's) or generated from
/// the config's synthetic spec.
fn load_samples(data: Option<&Path>, spec: &mut DatasetSpec) -> CliResult<Vec<MultimodalSample>> {
    match data {
        Some(path) => {
            require_file(path, "--data")?;
            let (file_spec, samples) = read_dataset(path)?;
            *spec = file_spec;
            Ok(samples)
        }
        None => Ok(Dataset::generate(spec)?.samples),
    }
}

fn split(samples: Vec<MultimodalSample>, spec: &DatasetSpec, test_fraction: f64) -> (Dataset, Dataset) {
    Dataset { spec: spec.clone(), samples }.split(1.0 - test_fraction)
}

pub fn train(a: TrainArgs) -> CliResult {
    let started = unix_now();
    require_file(&a.config, "--config")?;
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(ab) = a.ablation {
        cfg.train.ablation = ab;
    }
    cfg.train.seed = resolve_seed(a.seed, cfg.train.seed)?;
    let samples = load_samples(a.data.as_deref(), &mut cfg.data)?;
    cfg.validate()?;
    let (tr, te) = split(samples, &cfg.data, cfg.train.test_fraction);
    if te.is_empty() {
        return Err(CliError::usage("train.test_fraction leaves no held-out samples"));
    }

    let outcome = train_model(&cfg, &tr.samples)?;
    let results = cfg
        .eval
        .protocols
        .iter()
        .map(|p| evaluate(&outcome.model, &te.samples, p, cfg.eval.mask_seed))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(&a.out)?;
    let checkpoint = a.out.join("model.cyck");
    let log = a.out.join("train_log.jsonl");
    save_checkpoint(&outcome.model, &checkpoint)?;
    write_file(&log, outcome.log_jsonl().as_bytes())?;
    cfg.save(&a.out.join("config.toml"))?;
    write_file(&a.out.join("metrics.json"), to_json(&results).as_bytes())?;
    Manifest {
        kind: RunKind::Train,
        ablation: cfg.train.ablation,
        task: cfg.data.task,
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        config_path: Some(a.config.clone()),
        data: a.data.clone(),
        output_dir: a.out.clone(),
        checkpoint,
        log: Some(log),
        config: cfg.clone(),
        results: results.clone(),
        started_unix: started,
        finished_unix: unix_now(),
    }
    .write(&a.out)?;

    print!("{}", single_seed_csv(cfg.data.task, &results));
    Ok(())
}

fn to_json(reports: &[MetricReport]) -> String {
    serde_json::to_string_pretty(reports).expect("metric reports serialize") + "\n"
}

fn single_seed_csv(task: Task, reports: &[MetricReport]) -> String {
    let mut out = MetricReport::csv_header(task) + "\n";
    for r in reports {
        out += &r.csv_row();
        out.push('\n');
    }
    out
}

/// One row per protocol with mean and sample stddev over mask seeds.
fn multi_seed_csv(task: Task, protocols: &[Protocol], reports: &[MetricReport]) -> String {
    let names = metric_names(task);
    let mut cols = vec!["protocol".to_string(), "seeds".to_string()];
    for n in names {
        cols.push(format!("{n}_mean"));
        cols.push(format!("{n}_std"));
    }
    let mut out = cols.join(",") + "\n";
    for p in protocols {
        let rows: Vec<&MetricReport> = reports.iter().filter(|r| &r.protocol == p).collect();
        let mut cells = vec![csv_cell(&p.to_string()), rows.len().to_string()];
        for n in names {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(n)).collect();
            match mean_std(&vals) {
                Some((m, s)) if vals.len() == rows.len() => {
                    cells.push(format_metric(m));
                    cells.push(format_metric(s));
                }
                _ => cells.extend([String::new(), String::new()]),
            }
        }
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

fn eval_samples(model: &CyinModel, data: Option<&Path>, all: bool) -> CliResult<Vec<MultimodalSample>> {
    let mut spec = model.config.data.clone();
    let samples = load_samples(data, &mut spec)?;
    if spec.task != model.task() {
        return Err(CliError::usage(format!("dataset task is {} but the checkpoint was trained for {}", spec.task, model.task())));
    }
    if all {
        return Ok(samples);
    }
    let (_, te) = split(samples, &spec, model.config.train.test_fraction);
    Ok(te.samples)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let started = unix_now();
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be >= 1"));
    }
    require_file(&a.checkpoint, "--checkpoint")?;
    let model = load_checkpoint(&a.checkpoint)?;
    let samples = eval_samples(&model, a.data.as_deref(), a.all_samples)?;
    if samples.is_empty() {
        return Err(CliError::usage("no samples to evaluate"));
    }

    let mut protocols = a.protocols.clone();
    if let Some(s) = &a.sweep {
        protocols.extend(s.protocols());
    }
    if protocols.is_empty() {
        protocols = model.config.eval.protocols.clone();
    }
    for p in &protocols {
        p.validate(model.num_modalities())?;
    }

    let mut reports = Vec::new();
    for p in &protocols {
        for k in 0..a.seeds as u64 {
            reports.push(evaluate(&model, &samples, p, a.mask_seed + k)?);
        }
    }
    let task = model.task();
    let csv = if a.seeds == 1 { single_seed_csv(task, &reports) } else { multi_seed_csv(task, &protocols, &reports) };

    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("eval.csv"), csv.as_bytes())?;
        write_file(&out.join("eval.json"), to_json(&reports).as_bytes())?;
        let cfg = &model.config;
        Manifest {
            kind: RunKind::Eval,
            ablation: cfg.train.ablation,
            task,
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            config_path: None,
            data: a.data.clone(),
            output_dir: out.clone(),
            checkpoint: a.checkpoint.clone(),
            log: None,
            config: cfg.clone(),
            results: reports,
            started_unix: started,
            finished_unix: unix_now(),
        }
        .write(out)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn report(a: ReportArgs) -> CliResult {
    let mut paths = Vec::new();
    find_manifests(&a.input, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!("no manifest.json under {}", a.input.display())));
    }
    let manifests = paths.iter().map(|p| Manifest::read(p)).collect::<CliResult<Vec<_>>>()?;
    let table = crate::report::Table::collect(&manifests)?;
    create_dir(&a.out)?;
    let md = table.markdown();
    write_file(&a.out.join("report.md"), md.as_bytes())?;
    write_file(&a.out.join("report.csv"), table.csv().as_bytes())?;
    if a.plot {
        match table.svg() {
            Some(svg) => write_file(&a.out.join("report.svg"), svg.as_bytes())?,
            None => eprintln!("warning: no random-protocol results to plot"),
        }
    }
    print!("{md}");
    Ok(())
}

fn find_manifests(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("--input {}: not a directory", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::runtime(e.to_string()))?.path();
        if path.is_dir() {
            find_manifests(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == crate::manifest::MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}
