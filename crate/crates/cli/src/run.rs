use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use klink_core::dataset::PreparedDataset;
use klink_core::train::metrics::summary_table;
use klink_core::train::{
    best_sweep_index, combined_loss_gradcheck, evaluate, run_ablation, sweep_lambda, Checkpoint, GradcheckSetup,
    LambdaTerm, MetricsReport, TrainConfig, TrainData, Variant, SWEEP_VALUES,
};
use klink_core::{Embedder, EmbeddingTable};
use log::{info, warn};
use serde::Serialize;

use crate::{AblateArgs, EvalArgs, GradcheckArgs, RunArgs, SplitName, SweepArgs, TrainArgs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Reads a config and returns it with the directory its relative paths are
/// resolved against.
pub fn load_config(path: &Path) -> Result<(TrainConfig, PathBuf)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config = TrainConfig::from_toml(&text).with_context(|| format!("{}", path.display()))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((config, base))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_path: PathBuf,
    /// Config after path resolution and command-line overrides.
    config: TrainConfig,
    out_dir: PathBuf,
    started_unix_ms: u64,
    finished_unix_ms: Option<u64>,
}

/// Output directory of a run, holding its manifest.
struct Session {
    manifest: RunManifest,
    out: PathBuf,
}

impl Session {
    fn start(command: &str, argv: &[String], config_path: &Path, config: &TrainConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let s = Session {
            manifest: RunManifest {
                command: command.into(),
                argv: argv.to_vec(),
                config_path: config_path.to_path_buf(),
                config: config.clone(),
                out_dir: out.to_path_buf(),
                started_unix_ms: unix_ms(),
                finished_unix_ms: None,
            },
            out: out.to_path_buf(),
        };
        s.write_manifest()?;
        Ok(s)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.out.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.finished_unix_ms = Some(unix_ms());
        self.write_manifest()
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

struct Loaded {
    config: TrainConfig,
    data: TrainData,
    embedder: Option<Embedder>,
}

fn load_data(dir: &Path) -> Result<TrainData> {
    let prepared = PreparedDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(prepared.into())
}

/// Config with paths resolved and overrides applied, the prepared data and
/// the prompt embedder if one is configured.
fn load_run(args: &RunArgs) -> Result<Loaded> {
    let (mut config, base) = load_config(&args.config)?;
    config.data.dir = args.data.clone().unwrap_or_else(|| resolve(&base, &config.data.dir));
    config.knowledge.embeddings = match &args.embeddings {
        Some(p) => Some(p.clone()),
        None => config.knowledge.embeddings.as_deref().map(|p| resolve(&base, p)),
    };
    if args.fallback_embeddings && config.knowledge.fallback_seed.is_none() {
        config.knowledge.fallback_seed = Some(config.train.seed);
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
        config.train.seeds = vec![seed];
    }
    let data = load_data(&config.data.dir)?;
    let table = match &config.knowledge.embeddings {
        Some(path) => {
            let (table, warnings) = EmbeddingTable::read(path)?;
            for w in warnings {
                warn!("{w}");
            }
            Some(table)
        }
        None => None,
    };
    let embedder = if table.is_none() && config.knowledge.fallback_seed.is_none() {
        None
    } else {
        Some(Embedder::new(table, config.knowledge.fallback_seed, config.knowledge.dim)?)
    };
    Ok(Loaded { config, data, embedder })
}

fn variant_name(config: &TrainConfig) -> String {
    Variant::ALL
        .into_iter()
        .find(|v| v.ablation() == config.ablation)
        .map_or_else(|| "custom".to_string(), |v| v.name().to_string())
}

fn metric_line(report: &MetricsReport) -> String {
    report
        .runs
        .iter()
        .flat_map(|r| r.metrics.named())
        .map(|(name, v)| format!("{name} {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut l = load_run(&a.run)?;
    if let Some(v) = &a.variant {
        l.config.ablation = Variant::parse(v)?.ablation();
    }
    let session = Session::start("train", argv, &a.run.config, &l.config, &a.out)?;
    let exp = l.config.experiment();
    let seed = l.config.train.seed;
    let name = variant_name(&l.config);
    let start = Instant::now();
    let outcome = klink_core::train::train(&exp, &l.data, l.embedder.as_ref(), seed)?;
    write_jsonl(&session.path(HISTORY_FILE), &outcome.history)?;
    outcome.checkpoint().save(&session.path(CHECKPOINT_FILE))?;
    let eval = evaluate(&outcome.model, &l.data.split.test, exp.settings.precision)?;
    let mut report = MetricsReport::new(name.clone());
    report.push(seed, eval.metrics)?;
    write_jsonl(&session.path(METRICS_FILE), &report.records())?;
    println!(
        "{name} seed {seed}: best epoch {} of {}, test {} ({:.1} s)",
        outcome.best_epoch,
        exp.settings.epochs,
        metric_line(&report),
        start.elapsed().as_secs_f64()
    );
    session.finish()
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let (mut config, base) = load_config(&a.config)?;
    config.data.dir = a.data.clone().unwrap_or_else(|| resolve(&base, &config.data.dir));
    let data = load_data(&config.data.dir)?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = checkpoint.to_model()?;
    let (label, samples) = match a.split {
        SplitName::Train => ("train", &data.split.train),
        SplitName::Validation => ("validation", &data.split.validation),
        SplitName::Test => ("test", &data.split.test),
    };
    let session = match &a.out {
        Some(out) => Some(Session::start("eval", argv, &a.config, &config, out)?),
        None => None,
    };
    let eval = evaluate(&model, samples, config.train.precision)
        .with_context(|| format!("evaluating {} on {}", a.checkpoint.display(), config.data.dir.display()))?;
    let mut report = MetricsReport::new(label);
    report.push(config.train.seed, eval.metrics)?;
    println!("{label}: {}", metric_line(&report));
    if let Some(session) = session {
        write_jsonl(&session.path(METRICS_FILE), &report.records())?;
        session.finish()?;
    }
    Ok(())
}

/// Tab-separated mean and standard deviation of every metric per row.
fn summary_tsv(key: &str, rows: &[(String, &MetricsReport)], extra: Option<(&str, &[usize])>) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut out = key.to_string();
    for s in first.summary() {
        out.push_str(&format!("\t{0}_mean\t{0}_std", s.metric));
    }
    if let Some((name, _)) = extra {
        out.push_str(&format!("\t{name}"));
    }
    out.push('\n');
    for (k, (label, report)) in rows.iter().enumerate() {
        out.push_str(label);
        for s in report.summary() {
            out.push_str(&format!("\t{}\t{}", s.mean, s.std));
        }
        if let Some((_, values)) = extra {
            out.push_str(&format!("\t{}", values[k]));
        }
        out.push('\n');
    }
    out
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let l = load_run(&a.run)?;
    let session = Session::start("ablate", argv, &a.run.config, &l.config, &a.out)?;
    let exp = l.config.experiment();
    let reports = run_ablation(&exp, &l.data, l.embedder.as_ref(), &l.config.train.seeds)?;
    let records: Vec<_> = reports.iter().flat_map(MetricsReport::records).collect();
    write_jsonl(&session.path(METRICS_FILE), &records)?;
    let rows: Vec<(String, &MetricsReport)> = reports.iter().map(|r| (r.variant.clone(), r)).collect();
    fs::write(session.path("ablation.tsv"), summary_tsv("variant", &rows, None))?;
    print!("{}", summary_table(&reports));
    session.finish()
}

pub fn sweep(a: &SweepArgs, argv: &[String]) -> Result<()> {
    let term = LambdaTerm::parse(&a.lambda)?;
    let l = load_run(&a.run)?;
    let session = Session::start("sweep", argv, &a.run.config, &l.config, &a.out)?;
    let seeds = &l.config.train.seeds;
    let points = sweep_lambda(
        &l.config.experiment(),
        &l.data,
        l.embedder.as_ref(),
        term,
        &SWEEP_VALUES,
        seeds,
    )?;
    let mut wins = vec![0usize; points.len()];
    for run in 0..seeds.len() {
        if let Some(k) = best_sweep_index(&points, run) {
            wins[k] += 1;
        }
    }
    let reports: Vec<MetricsReport> = points.iter().map(|p| p.report.clone()).collect();
    let records: Vec<_> = reports.iter().flat_map(MetricsReport::records).collect();
    write_jsonl(&session.path(METRICS_FILE), &records)?;
    let rows: Vec<(String, &MetricsReport)> = points.iter().map(|p| (format!("{:e}", p.value), &p.report)).collect();
    let key = format!("lambda_{}", term.symbol());
    fs::write(session.path("sweep.tsv"), summary_tsv(&key, &rows, Some(("best_runs", &wins))))?;
    print!("{}", summary_table(&reports));
    let best: Vec<String> = points
        .iter()
        .zip(&wins)
        .filter(|(_, &w)| w > 0)
        .map(|(p, w)| format!("{:e} ({w})", p.value))
        .collect();
    println!("best {key} over {} seeds: {}", seeds.len(), best.join(", "));
    session.finish()
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut setup = GradcheckSetup::default();
    if let Some(path) = &a.config {
        let (config, _) = load_config(path)?;
        setup.length = config.model.patch_size * config.model.window.max(2);
        setup.signal = config.model;
        setup.embedding_dim = config.knowledge.dim;
        setup.weights = config.loss;
    }
    if let Some(seed) = a.seed {
        setup.seed = seed;
    }
    let start = Instant::now();
    let report = combined_loss_gradcheck(&setup)?;
    let worst = report
        .worst
        .as_ref()
        .map_or_else(String::new, |(name, i)| format!(" at {name}[{i}]"));
    let detail = format!(
        "{} entries, {} unresolved kinks, {:.1} s",
        report.checked,
        report.kinks,
        start.elapsed().as_secs_f64()
    );
    if report.passed {
        println!("PASS  max rel err {:.2e} < {:e}{worst} ({detail})", report.max_rel_error, report.tolerance);
        info!("analytic {:e}, numeric {:e} at the worst entry", report.worst_values.0, report.worst_values.1);
        Ok(())
    } else {
        println!("FAIL  max rel err {:.2e} >= {:e}{worst} ({detail})", report.max_rel_error, report.tolerance);
        bail!(
            "gradient check failed: analytic {:e}, numeric {:e}{worst}",
            report.worst_values.0,
            report.worst_values.1
        )
    }
}
