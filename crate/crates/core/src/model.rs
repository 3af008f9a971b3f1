//! Parameters and forward passes of the two-branch model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{self, LossWeights, W_M_ALIGN, W_R_ALIGN};
use crate::dataset::{MtsSample, Task};
use crate::error::{Error, Result};
use crate::knowledge::{self, KnowledgeContext, W_M_LABEL, W_M_SENSOR};
use crate::numeric::{BoundParams, Graph, ParamStore, Precision, Tensor, Var};
use crate::signal::{self, NormMode, RunningStats, SignalConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_sensors: usize,
    pub length: usize,
    pub signal: SignalConfig,
    pub embedding_dim: usize,
    pub task: Task,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        if self.n_sensors < 2 {
            return Err(Error::invalid("need at least 2 sensors"));
        }
        if self.signal.patch_size > self.length {
            return Err(Error::invalid(format!(
                "patch size {} exceeds sample length {}",
                self.signal.patch_size, self.length
            )));
        }
        if self.signal.window > self.patch_count() {
            return Err(Error::invalid(format!(
                "window {} exceeds patch count {}",
                self.signal.window,
                self.patch_count()
            )));
        }
        if self.task.output_width() == 0 {
            return Err(Error::invalid("task has no outputs"));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        self.length / self.signal.patch_size
    }

    pub fn nodes(&self) -> usize {
        self.n_sensors * self.patch_count()
    }

    pub fn head_widths(&self) -> Vec<usize> {
        self.signal
            .head_widths(self.n_sensors, self.patch_count(), self.task.output_width())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn check_sample(&self, s: &MtsSample) -> Result<()> {
        if s.n != self.n_sensors || s.l != self.length {
            return Err(Error::invalid(format!(
                "sample {} is {}x{}, model expects {}x{}",
                s.id, s.n, s.l, self.n_sensors, self.length
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KLinkModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
}

/// Signal-branch values recorded for one batch.
pub struct SignalPass {
    /// Per sample: `nodes x d_h` node features after positional encoding.
    pub node_features: Vec<Var>,
    /// Per sample: row-stochastic `nodes x nodes` edges.
    pub edges: Vec<Var>,
    /// `[batch, outputs]`
    pub outputs: Var,
    pub norm_nodes: Vec<Var>,
}

/// Loss nodes of one training batch.
pub struct LossTerms {
    pub total: Var,
    pub downstream: Var,
    pub sensor: Vec<Var>,
    pub label: Option<Var>,
    pub edge: Vec<Var>,
    pub norm_nodes: Vec<Var>,
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl KLinkModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = &config.signal;
        let d_h = sc.hidden_dim;
        let mut params = ParamStore::new();
        for block in 0..sc.blocks() {
            let (c_in, c_out) = (sc.block_channels[block], sc.block_channels[block + 1]);
            params.insert(signal::conv_w(block), he(&[c_out, c_in, sc.kernel], c_in * sc.kernel, &mut rng));
            params.insert(signal::bn_gamma(block), Tensor::full(&[c_out], 1.0));
            params.insert(signal::bn_beta(block), Tensor::zeros(&[c_out]));
        }
        let flat = sc.block_channels[sc.blocks()] * sc.encoded_length()?;
        params.insert(signal::ENC_PROJ_W, he(&[flat, d_h], flat, &mut rng));
        params.insert(signal::ENC_PROJ_B, Tensor::zeros(&[d_h]));
        params.insert(signal::W_S, Tensor::randn(&[d_h, d_h], 1.0 / (d_h as f64).sqrt(), &mut rng));
        params.insert(signal::W_G, he(&[d_h, d_h], d_h, &mut rng));
        params.insert(signal::B_G, Tensor::zeros(&[d_h]));
        let widths = config.head_widths();
        for (layer, pair) in widths.windows(2).enumerate() {
            let std = if layer + 2 == widths.len() {
                (1.0 / pair[0] as f64).sqrt()
            } else {
                (2.0 / pair[0] as f64).sqrt()
            };
            params.insert(signal::head_w(layer), Tensor::randn(&[pair[0], pair[1]], std, &mut rng));
            params.insert(signal::head_b(layer), Tensor::zeros(&[pair[1]]));
        }
        // prompt embeddings are unit vectors, so unit-variance heads give
        // mapped features with unit-scale entries
        params.insert(W_M_SENSOR, Tensor::randn(&[config.embedding_dim, d_h], 1.0, &mut rng));
        params.insert(W_M_LABEL, Tensor::randn(&[config.embedding_dim, d_h], 1.0, &mut rng));
        params.insert(W_M_ALIGN, Tensor::randn(&[d_h, d_h], 1.0 / (d_h as f64).sqrt(), &mut rng));
        params.insert(W_R_ALIGN, Tensor::randn(&[2 * d_h, d_h], 1.0 / (2.0 * d_h as f64).sqrt(), &mut rng));
        let running = (0..sc.blocks())
            .map(|b| RunningStats::new(sc.block_channels[b + 1]))
            .collect();
        Ok(KLinkModel {
            config,
            params,
            running,
        })
    }

    pub fn head_layers(&self) -> usize {
        self.config.head_widths().len() - 1
    }

    /// Signal branch for a batch: encoder, positional encoding, graph
    /// construction, windowed message passing, temporal pooling and head.
    pub fn forward_signal(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &[&MtsSample],
        training: bool,
    ) -> Result<SignalPass> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in batch {
            self.config.check_sample(s)?;
        }
        let sc = &self.config.signal;
        let n = self.config.n_sensors;
        let nodes = self.config.nodes();
        let slices = g.constant(signal::patch_slices(batch, sc.patch_size)?)?;
        let mode = if training {
            NormMode::Batch
        } else {
            NormMode::Running(&self.running)
        };
        let encoded = signal::encode_sensors(g, p, sc, slices, &mode)?;
        let pe = g.constant(signal::positional_encoding(self.config.patch_count(), n, sc.hidden_dim))?;
        let (w_s, w_g, b_g) = (p.var(signal::W_S)?, p.var(signal::W_G)?, p.var(signal::B_G)?);
        let mut node_features = Vec::with_capacity(batch.len());
        let mut edges = Vec::with_capacity(batch.len());
        let mut pooled = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let raw = g.slice_rows(encoded.features, b * nodes, (b + 1) * nodes)?;
            let z = g.add(raw, pe)?;
            let e = signal::construct_graph(g, z, w_s)?;
            let updated = signal::mpnn_forward(g, z, e, n, sc.window, w_g, b_g)?;
            pooled.push(signal::temporal_pool(g, updated, n, sc.window)?);
            node_features.push(z);
            edges.push(e);
        }
        let outputs = signal::readout_and_head(g, p, &pooled, self.head_layers())?;
        Ok(SignalPass {
            node_features,
            edges,
            outputs,
            norm_nodes: encoded.norm_nodes,
        })
    }

    pub fn downstream_loss(&self, g: &mut Graph, outputs: Var, batch: &[&MtsSample]) -> Result<Var> {
        match &self.config.task {
            Task::Regression => {
                let y = Tensor::matrix(batch.len(), 1, batch.iter().map(|s| s.label).collect())?;
                let y = g.constant(y)?;
                g.mse(outputs, y)
            }
            Task::Classification { class_names } => {
                let targets: Vec<usize> = batch.iter().map(|s| s.class_index()).collect();
                if let Some(bad) = targets.iter().find(|&&c| c >= class_names.len()) {
                    return Err(Error::invalid(format!("class index {bad} out of range")));
                }
                g.cross_entropy(outputs, &targets)
            }
        }
    }

    /// Records the full training objective for one batch. Knowledge-branch
    /// terms are built only for non-zero weights.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        batch: &[&MtsSample],
        knowledge: Option<&KnowledgeContext>,
        weights: &LossWeights,
    ) -> Result<LossTerms> {
        weights.validate()?;
        let pass = self.forward_signal(g, p, batch, true)?;
        let downstream = self.downstream_loss(g, pass.outputs, batch)?;

        let mut sensor = Vec::new();
        let mut edge = Vec::new();
        let mut label = None;
        if weights.uses_knowledge() {
            let knowledge =
                knowledge.ok_or_else(|| Error::invalid("alignment terms need prompt embeddings"))?;
            let sensor_emb = g.constant(knowledge.sensor_embeddings.clone())?;
            let sensor_part = knowledge::map_sensor_prompts(g, sensor_emb, p.var(W_M_SENSOR)?)?;
            let w_m_label = p.var(W_M_LABEL)?;
            let w_m = p.var(W_M_ALIGN)?;
            let w_r = p.var(W_R_ALIGN)?;
            let mut signal_readouts = Vec::new();
            let mut knowledge_readouts = Vec::new();
            for (b, s) in batch.iter().enumerate() {
                let z = pass.node_features[b];
                if weights.lambda_s > 0.0 {
                    sensor.push(alignment::sensor_level_loss(
                        g,
                        z,
                        sensor_part,
                        w_m,
                        weights.tau,
                        weights.similarity,
                    )?);
                }
                if weights.lambda_l > 0.0 || weights.lambda_e > 0.0 {
                    let label_emb = g.constant(knowledge.label_embedding(s.label)?.clone())?;
                    let kg = knowledge::build_knowledge_graph(g, sensor_part, label_emb, w_m_label, weights.lambda_e > 0.0)?;
                    if let Some(ek) = kg.edges {
                        edge.push(alignment::edge_loss(g, pass.edges[b], ek)?);
                    }
                    if weights.lambda_l > 0.0 {
                        let width = g.shape(z).iter().product();
                        signal_readouts.push(g.reshape(z, &[1, width])?);
                        let mapped = g.matmul(kg.node_features, w_r)?;
                        knowledge_readouts.push(g.reshape(mapped, &[1, width])?);
                    }
                }
            }
            if weights.lambda_l > 0.0 {
                let gs = g.concat(&signal_readouts, 0)?;
                let gk = g.concat(&knowledge_readouts, 0)?;
                label = Some(alignment::label_level_loss(g, gs, gk, weights.tau, weights.similarity)?);
            }
        }
        let total = alignment::combined_loss(g, downstream, &sensor, label, &edge, weights)?;
        Ok(LossTerms {
            total,
            downstream,
            sensor,
            label,
            edge,
            norm_nodes: pass.norm_nodes,
        })
    }

    /// Folds the batch statistics recorded in `g` into the running averages.
    pub fn update_running_stats(&mut self, g: &Graph, norm_nodes: &[Var]) {
        for (stats, &v) in self.running.iter_mut().zip(norm_nodes) {
            if let Some(b) = g.batch_stats(v) {
                stats.update(&b.mean, &b.var, b.count);
            }
        }
    }

    /// Inference with the signal branch only; `[samples, outputs]`.
    pub fn predict(&self, samples: &[MtsSample], precision: Precision) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let mut rows = Vec::new();
        let mut width = 0;
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&MtsSample> = chunk.iter().collect();
            let mut g = Graph::with_precision(precision);
            let p = self.params.bind(&mut g)?;
            let pass = self.forward_signal(&mut g, &p, &refs, false)?;
            let out = g.value(pass.outputs);
            width = out.cols();
            rows.extend_from_slice(out.values());
        }
        Tensor::new(vec![samples.len(), width], rows)
    }

    /// Evaluation-mode edge matrices, one per sample.
    pub fn edge_matrices(&self, samples: &[MtsSample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&MtsSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g)?;
            let pass = self.forward_signal(&mut g, &p, &refs, false)?;
            out.extend(pass.edges.iter().map(|&e| g.value(e).clone()));
        }
        Ok(out)
    }
}
