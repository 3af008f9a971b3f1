use std::collections::HashSet;
use std::fs;

use anyhow::{bail, ensure, Context, Result};
use klink_core::dataset::{
    group_consistent_embeddings, load_cmapss, make_synthetic, read_samples, split_by_subject, split_windows,
    write_atomically, CmapssFiles, CmapssPreparation, PreparedDataset, SyntheticSpec,
};
use klink_core::knowledge::{label_prompt, render_label, sensor_prompts, SensorNaming};
use klink_core::Task;
use log::{info, warn};
use serde::Serialize;

use crate::run::{load_config, resolve};
use crate::{Format, PrepareArgs, PromptArgs, TaskKind};

pub const RELATION_FILE: &str = "relation.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

#[derive(Serialize)]
struct Relation<'a> {
    sensors: &'a [String],
    groups: &'a [usize],
    /// 1 within a group, 0 across groups.
    relation: &'a [Vec<f64>],
}

fn ratios(v: &[f64]) -> Result<[f64; 3]> {
    match v {
        &[a, b, c] => Ok([a, b, c]),
        _ => bail!("--ratios takes three comma-separated fractions, got {v:?}"),
    }
}

pub fn prepare_data(a: &PrepareArgs) -> Result<()> {
    ensure!(a.source.exists(), "source {} does not exist", a.source.display());
    match a.format {
        Format::Cmapss => {
            let prep = CmapssPreparation {
                window: a.window,
                stride: a.stride,
                validation_fraction: a.validation_fraction,
                seed: a.seed,
                ..CmapssPreparation::default()
            };
            let (split, skipped) = load_cmapss(&CmapssFiles::in_dir(&a.source, &a.subset), &prep)?;
            for unit in &skipped {
                warn!("unit {unit} is shorter than the window and was skipped");
            }
            let category = a.category.clone().unwrap_or_else(|| "remaining useful life".into());
            let prepared = PreparedDataset::from_raw(&split, Task::Regression, category)?;
            write_atomically(&a.out, |dir| prepared.save(dir))?;
            report(&prepared, a);
        }
        Format::Synthetic => {
            let text = fs::read_to_string(&a.source).with_context(|| format!("reading {}", a.source.display()))?;
            let spec: SyntheticSpec =
                toml::from_str(&text).with_context(|| format!("parsing {}", a.source.display()))?;
            let mut corpus = make_synthetic(&spec)?;
            if let Some(c) = &a.category {
                corpus.category = c.clone();
            }
            let prepared = PreparedDataset::from_raw(&corpus.split, corpus.task.clone(), corpus.category.clone())?;
            // one entry per timestamp covers every patch size
            let table = group_consistent_embeddings(&corpus, spec.length, a.dim, a.embedding_seed);
            let relation = Relation {
                sensors: &corpus.sensor_names,
                groups: &corpus.group_of,
                relation: &corpus.relation,
            };
            write_atomically(&a.out, |dir| {
                prepared.save(dir)?;
                fs::write(dir.join(RELATION_FILE), serde_json::to_string_pretty(&relation)?)?;
                table.write(&dir.join(EMBEDDINGS_FILE))
            })?;
            report(&prepared, a);
        }
        Format::Samples => {
            let samples = read_samples(&a.source)?;
            let task = match a.task {
                Some(TaskKind::Regression) => Task::Regression,
                Some(TaskKind::Classification) => {
                    ensure!(!a.classes.is_empty(), "classification needs --classes");
                    Task::Classification {
                        class_names: a.classes.clone(),
                    }
                }
                None => bail!("a sample file needs --task"),
            };
            let category = a
                .category
                .clone()
                .context("a sample file needs --category, the phrase used in label prompts")?;
            let r = ratios(&a.ratios)?;
            let split = if samples.iter().all(|s| s.subject.is_some()) {
                split_by_subject(samples, r, a.seed)?
            } else {
                split_windows(samples, r, a.seed)?
            };
            let prepared = PreparedDataset::from_raw(&split, task, category)?;
            write_atomically(&a.out, |dir| prepared.save(dir))?;
            report(&prepared, a);
        }
    }
    Ok(())
}

fn report(p: &PreparedDataset, a: &PrepareArgs) {
    let [train, validation, test] = p.meta.counts;
    info!(
        "{} sensors x {} steps: {train} train, {validation} validation, {test} test samples written to {}",
        p.meta.sensors.len(),
        p.meta.length,
        a.out.display()
    );
}

pub fn emit_prompts(a: &PromptArgs) -> Result<()> {
    let (config, base) = load_config(&a.config)?;
    let dir = a.data.clone().unwrap_or_else(|| resolve(&base, &config.data.dir));
    let data = PreparedDataset::load(&dir)?;
    let patch_count = data.meta.length / config.model.patch_size;
    ensure!(
        patch_count > 0,
        "patch size {} exceeds the series length {}",
        config.model.patch_size,
        data.meta.length
    );
    let category = a.category.as_deref().unwrap_or(&data.meta.category);
    let mut sensor_list = sensor_prompts(&data.meta.sensors, patch_count, SensorNaming::Names)?;
    if a.index_prompts {
        sensor_list.extend(sensor_prompts(&data.meta.sensors, patch_count, SensorNaming::Index)?);
    }
    let mut seen = HashSet::new();
    let mut prompts: Vec<String> = sensor_list.into_iter().filter(|p| seen.insert(p.clone())).collect();
    let sensor_count = prompts.len();
    for s in &data.split.train {
        let p = label_prompt(category, &render_label(&data.meta.task, s.label)?);
        if seen.insert(p.clone()) {
            prompts.push(p);
        }
    }
    let mut text = prompts.join("\n");
    text.push('\n');
    let partial = a.out.with_extension("partial");
    fs::write(&partial, text).with_context(|| format!("writing {}", partial.display()))?;
    fs::rename(&partial, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    info!(
        "{} unique prompts ({} sensor, {} label) written to {}",
        prompts.len(),
        sensor_count,
        prompts.len() - sensor_count,
        a.out.display()
    );
    Ok(())
}
