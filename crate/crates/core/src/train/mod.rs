//! Training loop, evaluation, ablations and loss-weight sweeps.

mod checkpoint;
mod config;
pub mod metrics;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Ablation, DataConfig, Experiment, KnowledgeConfig, TrainConfig, TrainSettings, Variant};
pub use metrics::{Metrics, MetricRecord, MetricSummary, MetricsReport, SeedRun};

use crate::dataset::{DatasetSplit, MtsSample, PreparedDataset, Task};
use crate::error::{Error, Result};
use crate::alignment::LossWeights;
use crate::knowledge::{Embedder, KnowledgeContext, SensorNaming, DEFAULT_EMBEDDING_DIM};
use crate::model::{KLinkModel, ModelConfig};
use crate::numeric::{finite_difference_check, Adam, GradCheckReport, Graph, Precision};
use crate::signal::SignalConfig;

/// A prepared corpus.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub split: DatasetSplit,
    pub task: Task,
    /// Phrase substituted into label prompts.
    pub category: String,
}

impl From<PreparedDataset> for TrainData {
    fn from(p: PreparedDataset) -> Self {
        TrainData {
            split: p.split,
            task: p.meta.task,
            category: p.meta.category,
        }
    }
}

impl TrainData {
    pub fn sensor_names(&self) -> Result<&[String]> {
        self.split
            .train
            .first()
            .map(|s| s.sensors.as_slice())
            .ok_or_else(|| Error::invalid("training split is empty"))
    }

    pub fn model_config(&self, exp: &Experiment, embedding_dim: usize) -> Result<ModelConfig> {
        let first = self
            .split
            .train
            .first()
            .ok_or_else(|| Error::invalid("training split is empty"))?;
        let config = ModelConfig {
            n_sensors: first.n,
            length: first.l,
            signal: exp.signal.clone(),
            embedding_dim,
            task: self.task.clone(),
        };
        config.validate()?;
        for s in self.split.train.iter().chain(&self.split.validation).chain(&self.split.test) {
            config.check_sample(s)?;
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Mean downstream loss (MSE or cross-entropy) of the predictions.
    pub downstream_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub train_loss: f64,
    pub downstream_loss: f64,
    pub validation: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub model: KLinkModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: Adam,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.best_epoch, Some(&self.optimizer))
    }
}

/// Groups shuffled indices into batches; a trailing single sample joins the
/// previous batch so every batch has a label-level negative.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        out.pop();
        let keep = out.len() - 1;
        let start = keep * size;
        out[keep] = &order[start..];
    }
    out
}

fn knowledge_context(
    exp: &Experiment,
    data: &TrainData,
    embedder: Option<&Embedder>,
    patch_count: usize,
) -> Result<Option<KnowledgeContext>> {
    if !exp.effective_weights().uses_knowledge() {
        return Ok(None);
    }
    let embedder = embedder.ok_or_else(|| Error::invalid("alignment terms need prompt embeddings"))?;
    KnowledgeContext::new(
        embedder,
        data.sensor_names()?,
        patch_count,
        &data.category,
        exp.ablation.naming(),
        &data.task,
        data.split.train.iter().map(|s| s.label),
    )
    .map(Some)
}

/// Trains one model and returns the best-validation parameters.
pub fn train(exp: &Experiment, data: &TrainData, embedder: Option<&Embedder>, seed: u64) -> Result<TrainOutcome> {
    exp.settings.validate()?;
    let weights = exp.effective_weights();
    weights.validate()?;
    let dim = embedder.map_or(DEFAULT_EMBEDDING_DIM, Embedder::dim);
    let config = data.model_config(exp, dim)?;
    let knowledge = knowledge_context(exp, data, embedder, config.patch_count())?;
    let mut model = KLinkModel::new(config, seed)?;
    let mut adam = Adam::new(exp.settings.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.split.train.len()).collect();
    let mut history = Vec::with_capacity(exp.settings.epochs);
    let mut best: Option<(f64, usize, KLinkModel)> = None;

    for epoch in 1..=exp.settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut downstream, mut count) = (0.0, 0.0, 0usize);
        for (b, idx) in batches(&order, exp.settings.batch_size).into_iter().enumerate() {
            let batch: Vec<&MtsSample> = idx.iter().map(|&i| &data.split.train[i]).collect();
            let mut g = Graph::with_precision(exp.settings.precision);
            let p = model.params.bind(&mut g)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            };
            let terms = model
                .training_loss(&mut g, &p, &batch, knowledge.as_ref(), &weights)
                .map_err(diverged)?;
            let loss = g.value(terms.total).item();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads = g.backward(terms.total).map_err(diverged)?;
            let grads = p.collect(&grads);
            if grads.values().any(|t| !t.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b });
            }
            adam.step(&mut model.params, &grads)?;
            model.update_running_stats(&g, &terms.norm_nodes);
            total += loss;
            downstream += g.value(terms.downstream).item();
            count += 1;
        }
        let validation = if data.split.validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.split.validation, exp.settings.precision)?.metrics)
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / count as f64,
            downstream_loss: downstream / count as f64,
            validation,
        };
        debug!(
            "seed {seed} epoch {epoch}: loss {:.6} downstream {:.6} validation {:?}",
            record.train_loss, record.downstream_loss, record.validation
        );
        // without a validation split the last epoch wins
        let criterion = validation.map_or(epoch as f64, |m| m.selection_value());
        if best.as_ref().is_none_or(|(v, _, _)| criterion > *v) {
            best = Some((criterion, epoch, model.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    info!("seed {seed}: best validation at epoch {best_epoch}");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        history,
        optimizer: adam,
    })
}

/// Signal-branch evaluation of `samples`.
pub fn evaluate(model: &KLinkModel, samples: &[MtsSample], precision: Precision) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let out = model.predict(samples, precision)?;
    match &model.config.task {
        Task::Regression => {
            let pred = out.values();
            let truth: Vec<f64> = samples.iter().map(|s| s.label).collect();
            let rmse = metrics::rmse(pred, &truth)?;
            Ok(Evaluation {
                metrics: Metrics::Regression {
                    rmse,
                    score: metrics::score(pred, &truth)?,
                },
                downstream_loss: rmse * rmse,
            })
        }
        Task::Classification { .. } => {
            let cols = out.cols();
            let pred = metrics::argmax_rows(out.values(), cols);
            let truth: Vec<usize> = samples.iter().map(|s| s.class_index()).collect();
            let mut ce = 0.0;
            for (row, &t) in out.values().chunks(cols).zip(&truth) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                ce += lse - row[t];
            }
            Ok(Evaluation {
                metrics: Metrics::Classification {
                    accuracy: metrics::accuracy(&pred, &truth)?,
                    macro_f1: metrics::macro_f1(&pred, &truth)?,
                },
                downstream_loss: ce / samples.len() as f64,
            })
        }
    }
}

/// Mean over samples of the share of edge weight that stays within a sensor
/// group: `sum_{i,j: group(i) = group(j)} e_ij / nodes`.
pub fn within_group_edge_mass(model: &KLinkModel, samples: &[MtsSample], group_of: &[usize]) -> Result<f64> {
    let n = model.config.n_sensors;
    if group_of.len() != n {
        return Err(Error::invalid(format!("{} group ids for {n} sensors", group_of.len())));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let edges = model.edge_matrices(samples)?;
    let mut total = 0.0;
    for e in &edges {
        let nodes = e.rows();
        let mut within = 0.0;
        for i in 0..nodes {
            for j in 0..nodes {
                if group_of[i % n] == group_of[j % n] {
                    within += e.get2(i, j);
                }
            }
        }
        total += within / nodes as f64;
    }
    Ok(total / edges.len() as f64)
}

/// One training run per seed, evaluated on the test split.
pub fn run_seeds(
    exp: &Experiment,
    data: &TrainData,
    embedder: Option<&Embedder>,
    seeds: &[u64],
    label: &str,
) -> Result<(MetricsReport, Vec<Evaluation>)> {
    let mut report = MetricsReport::new(label);
    let mut evals = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = train(exp, data, embedder, seed)?;
        let eval = evaluate(&outcome.model, &data.split.test, exp.settings.precision)?;
        info!("{label} seed {seed}: {:?}", eval.metrics);
        report.push(seed, eval.metrics)?;
        evals.push(eval);
    }
    Ok((report, evals))
}

/// The full model followed by the six ablated variants.
pub fn run_ablation(
    exp: &Experiment,
    data: &TrainData,
    embedder: Option<&Embedder>,
    seeds: &[u64],
) -> Result<Vec<MetricsReport>> {
    Variant::ALL
        .iter()
        .map(|&v| run_seeds(&exp.with_variant(v), data, embedder, seeds, v.name()).map(|(r, _)| r))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaTerm {
    Sensor,
    Label,
    Edge,
}

impl LambdaTerm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(LambdaTerm::Sensor),
            "L" | "l" => Ok(LambdaTerm::Label),
            "E" | "e" => Ok(LambdaTerm::Edge),
            _ => Err(Error::invalid(format!("unknown loss term `{s}`, expected S, L or E"))),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            LambdaTerm::Sensor => 'S',
            LambdaTerm::Label => 'L',
            LambdaTerm::Edge => 'E',
        }
    }
}

pub const SWEEP_VALUES: [f64; 6] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub report: MetricsReport,
    /// Test evaluations in seed order.
    pub evaluations: Vec<Evaluation>,
}

/// Trains every `(value, seed)` pair with one loss weight replaced and the
/// others left as configured.
pub fn sweep_lambda(
    exp: &Experiment,
    data: &TrainData,
    embedder: Option<&Embedder>,
    term: LambdaTerm,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|&value| {
            let mut e = exp.clone();
            match term {
                LambdaTerm::Sensor => e.weights.lambda_s = value,
                LambdaTerm::Label => e.weights.lambda_l = value,
                LambdaTerm::Edge => e.weights.lambda_e = value,
            }
            let label = format!("lambda_{}={value:e}", term.symbol());
            let (report, evaluations) = run_seeds(&e, data, embedder, seeds, &label)?;
            Ok(SweepPoint {
                value,
                report,
                evaluations,
            })
        })
        .collect()
}

/// Index of the best sweep value for the `run`-th seed: highest selection
/// metric, ties broken by lower test downstream loss, then by lower index.
pub fn best_sweep_index(points: &[SweepPoint], run: usize) -> Option<usize> {
    let key = |p: &SweepPoint| {
        let e = p.evaluations.get(run)?;
        Some((e.metrics.selection_value(), -e.downstream_loss))
    };
    let mut best: Option<(usize, (f64, f64))> = None;
    for (k, p) in points.iter().enumerate() {
        let v = key(p)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Inputs of the end-to-end gradient check of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSetup {
    pub n_sensors: usize,
    pub length: usize,
    pub batch: usize,
    pub classes: usize,
    pub signal: SignalConfig,
    pub embedding_dim: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSetup {
    /// Three sensors, two patches, two samples, hidden size 4.
    fn default() -> Self {
        GradcheckSetup {
            n_sensors: 3,
            length: 8,
            batch: 2,
            classes: 2,
            signal: SignalConfig {
                block_channels: vec![1, 2],
                kernel: 2,
                hidden_dim: 4,
                patch_size: 4,
                window: 2,
                head_hidden: vec![3],
            },
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            weights: LossWeights::default(),
            seed: 0,
            eps: 3e-4,
            tolerance: 1e-4,
        }
    }
}

/// Finite-difference check of the full training objective through both
/// branches, over every parameter entry, on random inputs in `[0, 1)`.
pub fn combined_loss_gradcheck(setup: &GradcheckSetup) -> Result<GradCheckReport> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let class_names: Vec<String> = (0..setup.classes).map(|c| format!("state {c}")).collect();
    let task = Task::Classification { class_names };
    let config = ModelConfig {
        n_sensors: setup.n_sensors,
        length: setup.length,
        signal: setup.signal.clone(),
        embedding_dim: setup.embedding_dim,
        task: task.clone(),
    };
    let mut model = KLinkModel::new(config, setup.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(2);
    // zero-initialized biases put relu inputs exactly on the kink; check at a
    // generic point instead
    for (_, t) in model.params.iter_mut() {
        if t.rank() == 1 {
            for v in t.values_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let names: Vec<String> = (0..setup.n_sensors).map(|i| format!("probe {i}")).collect();
    let samples = (0..setup.batch)
        .map(|b| {
            let values = (0..setup.n_sensors * setup.length).map(|_| rng.random::<f64>()).collect();
            MtsSample::new(format!("g{b}"), names.clone(), setup.length, values, (b % setup.classes) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&MtsSample> = samples.iter().collect();
    let embedder = Embedder::fallback(setup.seed, setup.embedding_dim);
    let knowledge = KnowledgeContext::new(
        &embedder,
        &names,
        model.config.patch_count(),
        "machine state",
        SensorNaming::Names,
        &task,
        samples.iter().map(|s| s.label),
    )?;
    finite_difference_check(&model.params, setup.eps, setup.tolerance, |g, p| {
        Ok(model.training_loss(g, p, &batch, Some(&knowledge), &setup.weights)?.total)
    })
}
